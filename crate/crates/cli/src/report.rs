use std::collections::BTreeMap;
use std::fmt;

use serde::Serialize;
use serde_json::Value;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Failure {
    /// Position of the string in the tested set.
    pub index: usize,
    pub string: String,
    pub oracle_member: bool,
    pub detail: String,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RunReport {
    pub command: String,
    pub parameters: BTreeMap<String, Value>,
    pub tested: usize,
    pub passed: usize,
    pub failed: usize,
    pub first_failure: Option<Failure>,
    /// Extra measurements, such as close-bracket accuracy.
    pub metrics: BTreeMap<String, f64>,
    /// Member and non-member with identical quantized traces, when one was found.
    pub adversarial_pair: Option<Value>,
    pub wall_time_secs: f64,
}

impl RunReport {
    pub fn new(command: impl Into<String>) -> Self {
        RunReport {
            command: command.into(),
            parameters: BTreeMap::new(),
            tested: 0,
            passed: 0,
            failed: 0,
            first_failure: None,
            metrics: BTreeMap::new(),
            adversarial_pair: None,
            wall_time_secs: 0.0,
        }
    }

    pub fn param(&mut self, key: &str, value: impl Serialize) {
        let v = serde_json::to_value(value).unwrap_or(Value::Null);
        self.parameters.insert(key.to_string(), v);
    }

    pub fn record(&mut self, ok: bool, failure: impl FnOnce() -> Failure) {
        self.tested += 1;
        if ok {
            self.passed += 1;
        } else {
            self.failed += 1;
            if self.first_failure.is_none() {
                self.first_failure = Some(failure());
            }
        }
    }

    pub fn succeeded(&self) -> bool {
        self.failed == 0
    }
}

impl fmt::Display for RunReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let params: Vec<String> = self
            .parameters
            .iter()
            .map(|(k, v)| match v {
                Value::String(s) => format!("{k}={s}"),
                v => format!("{k}={v}"),
            })
            .collect();
        writeln!(f, "{} ({})", self.command, params.join(" "))?;
        let pct = if self.tested == 0 {
            100.0
        } else {
            100.0 * self.passed as f64 / self.tested as f64
        };
        writeln!(
            f,
            "tested {}  passed {}  failed {}  ({pct:.2}% agreement)",
            self.tested, self.passed, self.failed
        )?;
        for (k, v) in &self.metrics {
            writeln!(f, "{k}: {v}")?;
        }
        if let Some(x) = &self.first_failure {
            writeln!(
                f,
                "first failure: #{} oracle_member={} {}",
                x.index, x.oracle_member, x.detail
            )?;
            writeln!(f, "  {}", x.string)?;
        }
        if let Some(pair) = &self.adversarial_pair {
            writeln!(f, "adversarial pair: {pair}")?;
        }
        write!(f, "wall time {:.2}s", self.wall_time_secs)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn counts_stay_consistent() {
        let mut r = RunReport::new("verify");
        r.record(true, || unreachable!());
        r.record(false, || Failure {
            index: 1,
            string: "^ >1 $".into(),
            oracle_member: false,
            detail: "accepted".into(),
        });
        r.record(false, || unreachable!());
        assert_eq!((r.tested, r.passed, r.failed), (3, 1, 2));
        assert_eq!(r.first_failure.as_ref().unwrap().index, 1);
        assert!(!r.succeeded());
        let json = serde_json::to_value(&r).unwrap();
        assert_eq!(json["tested"], 3);
    }
}
