use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use dycklab::corpus::{read_corpus, write_corpus, CorpusHeader};
use dycklab::dyck::{enumerate_strings, legal_next_tokens, render, wrap, Sampler, SamplerConfig};
use dycklab::generator::{
    build_generator, close_bracket_accuracy, default_epsilon, prefix_readouts, NetworkModel,
};
use dycklab::precision::{
    balanced_strings, find_adversarial_pair, run_sweep, AdversarialSearch, Construction,
    PrecisionSweep,
};
use dycklab::recognizer::{build_recognizer, recognize};
use dycklab::{oracle_recognize, Error, Result, Token};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::json;

use crate::args::{ExportArgs, GenCorpusArgs, Mode, Precision, SweepArgs, VerifyArgs};
use crate::report::{Failure, RunReport};

fn create(path: &Path) -> Result<BufWriter<File>> {
    let f = File::create(path).map_err(|e| {
        Error::Io(std::io::Error::new(
            e.kind(),
            format!("cannot write {}: {e}", path.display()),
        ))
    })?;
    Ok(BufWriter::new(f))
}

/// Counts of interior lengths in ten equal bins over `lo..=hi`.
fn histogram(lengths: &[usize], lo: usize, hi: usize) -> Vec<(usize, usize, usize)> {
    let width = (hi - lo + 1).div_ceil(10).max(1);
    let mut bins: Vec<(usize, usize, usize)> = (lo..=hi)
        .step_by(width)
        .map(|a| (a, (a + width - 1).min(hi), 0))
        .collect();
    for &l in lengths {
        let b = (l.clamp(lo, hi) - lo) / width;
        bins[b].2 += 1;
    }
    bins
}

pub fn gen_corpus(args: &GenCorpusArgs) -> Result<()> {
    let (min_len, max_len, num_tokens) = args.split.defaults();
    let min_len = args.min_len.unwrap_or(min_len);
    let max_len = args.max_len.unwrap_or(max_len);
    let num_tokens = args.num_tokens.unwrap_or(num_tokens);
    let cfg = SamplerConfig::new(args.k, args.depth, min_len, max_len)?;
    let corpus = Sampler::new(cfg, args.seed)?.corpus(num_tokens);
    let header = CorpusHeader {
        k: args.k,
        depth: args.depth,
        seed: args.seed,
    };
    write_corpus(
        create(&args.out)?,
        &header,
        corpus.iter().map(|c| &c.tokens),
    )?;

    let lengths: Vec<usize> = corpus.iter().map(|c| c.interior().len()).collect();
    let tokens: usize = corpus.iter().map(|c| c.tokens.len()).sum();
    println!(
        "wrote {}: {} strings, {tokens} tokens, k={} D={} seed={}",
        args.out.display(),
        corpus.len(),
        args.k,
        args.depth,
        args.seed
    );
    println!("interior length histogram:");
    for (a, b, count) in histogram(&lengths, min_len, max_len) {
        println!("  {a:>6}..={b:<6} {count}");
    }
    Ok(())
}

struct Suite {
    k: u32,
    depth: u32,
    strings: Vec<Vec<Token>>,
    /// Length used for the adversarial search under fixed point.
    length: usize,
}

fn load_suite(args: &VerifyArgs, report: &mut RunReport) -> Result<Suite> {
    let need = |v: Option<u32>, flag: &str| {
        v.ok_or_else(|| Error::InvalidInput(format!("{flag} is required without --corpus")))
    };
    if let Some(path) = &args.corpus {
        let file = File::open(path).map_err(|e| {
            Error::Io(std::io::Error::new(
                e.kind(),
                format!("cannot read {}: {e}", path.display()),
            ))
        })?;
        let corpus = read_corpus(BufReader::new(file))?;
        let k = args.k.unwrap_or(corpus.header.k);
        if k != corpus.header.k {
            return Err(Error::InvalidInput(format!(
                "--k {k} disagrees with the corpus header k={}",
                corpus.header.k
            )));
        }
        report.param("corpus", path.display().to_string());
        let length = corpus.strings.iter().map(Vec::len).max().unwrap_or(2);
        return Ok(Suite {
            k,
            depth: args.depth.unwrap_or(corpus.header.depth),
            strings: corpus.strings,
            length,
        });
    }
    let k = need(args.k, "--k")?;
    let depth = need(args.depth, "--D")?;
    if let Some(len) = args.exhaustive {
        report.param("exhaustive", len);
        let strings = std::iter::once(Vec::new())
            .chain(enumerate_strings(k, len))
            .map(|b| wrap(&b))
            .collect();
        return Ok(Suite {
            k,
            depth,
            strings,
            length: len + 2,
        });
    }
    if let Some(n) = args.n {
        report.param("n", n);
        report.param("trials", args.trials);
        report.param("seed", args.seed);
        let mut rng = ChaCha8Rng::seed_from_u64(args.seed);
        let strings = balanced_strings(k, depth, n, args.trials, &mut rng)?
            .into_iter()
            .map(|(s, _)| s)
            .collect();
        return Ok(Suite {
            k,
            depth,
            strings,
            length: n,
        });
    }
    Err(Error::InvalidInput(
        "one of --corpus, --exhaustive or --n is required".into(),
    ))
}

fn is_member(s: &[Token], k: u32, depth: u32) -> bool {
    oracle_recognize(s, k, depth).is_ok_and(|v| v.member)
}

pub fn verify(args: &VerifyArgs) -> Result<RunReport> {
    let started = Instant::now();
    let mode = match args.mode {
        Mode::Recognize => "recognize",
        Mode::Generate => "generate",
    };
    let mut report = RunReport::new(format!("verify {mode}"));
    let suite = load_suite(args, &mut report)?;
    let (k, depth) = (suite.k, suite.depth);
    let longest = suite.strings.iter().map(Vec::len).max().unwrap_or(2);
    let n_max = args.n_max.unwrap_or(longest).max(2);
    report.param("k", k);
    report.param("D", depth);
    report.param("n_max", n_max);
    report.param("precision", args.precision.to_string());
    let cfg = args.precision.config();

    match args.mode {
        Mode::Recognize => {
            let net = build_recognizer(k, depth, n_max)?;
            for (index, s) in suite.strings.iter().enumerate() {
                let member = is_member(s, k, depth);
                let accepts = recognize(&net, s, &cfg)?;
                report.record(accepts == member, || Failure {
                    index,
                    string: render(s),
                    oracle_member: member,
                    detail: format!("network {}", if accepts { "accepts" } else { "rejects" }),
                });
            }
            if let (Precision::Fixed(f), false) = (args.precision, report.succeeded()) {
                if let AdversarialSearch::Found(pair) =
                    find_adversarial_pair(f, k, depth, suite.length)?
                {
                    report.adversarial_pair = Some(json!({
                        "frac_bits": f,
                        "n": suite.length,
                        "member": render(&pair.member),
                        "non_member": render(&pair.non_member),
                        "edited_positions": pair.edited,
                        "shared_verdict": pair.verdict,
                    }));
                }
            }
        }
        Mode::Generate => verify_generator(&suite, n_max, args.precision, &mut report)?,
    }
    report.wall_time_secs = started.elapsed().as_secs_f64();
    Ok(report)
}

fn verify_generator(
    suite: &Suite,
    n_max: usize,
    precision: Precision,
    report: &mut RunReport,
) -> Result<()> {
    let (k, depth) = (suite.k, suite.depth);
    let cfg = precision.config();
    let net = build_generator(k, depth, n_max)?;
    let eps = default_epsilon(k);
    let (mut prefixes, mut agreeing) = (0usize, 0usize);
    let mut members = Vec::new();
    for (index, s) in suite.strings.iter().enumerate() {
        let body = match s.last() {
            Some(Token::End) => &s[..s.len() - 1],
            _ => &s[..],
        };
        if body.is_empty() {
            report.record(false, || Failure {
                index,
                string: render(s),
                oracle_member: false,
                detail: "empty string".into(),
            });
            continue;
        }
        let readouts = prefix_readouts(&net, body, &cfg)?;
        let mut mismatch = None;
        for i in 0..body.len() {
            let Ok(want) = legal_next_tokens(&body[..=i], k, depth, n_max) else {
                break;
            };
            prefixes += 1;
            if readouts[i].legal_set == want {
                agreeing += 1;
            } else if mismatch.is_none() {
                mismatch = Some((i, want));
            }
        }
        let member = is_member(s, k, depth);
        let all_above = s[0] == Token::Start
            && (0..s.len() - 1).all(|i| readouts[i].probability(s[i + 1]) >= eps);
        if member {
            members.push(s.clone());
        }
        report.record(mismatch.is_none() && all_above == member, || Failure {
            index,
            string: render(s),
            oracle_member: member,
            detail: match &mismatch {
                Some((i, want)) => format!(
                    "after {} tokens the network allows {:?}, the oracle {:?}",
                    i + 1,
                    readouts[*i].legal_set,
                    want
                ),
                None => format!("every step at or above {eps}: {all_above}"),
            },
        });
    }
    report
        .metrics
        .insert("prefixes_checked".into(), prefixes as f64);
    report.metrics.insert(
        "legal_set_agreement".into(),
        if prefixes == 0 {
            1.0
        } else {
            agreeing as f64 / prefixes as f64
        },
    );
    let model = NetworkModel { net: &net, cfg };
    if let Ok(acc) = close_bracket_accuracy(&model, &members) {
        report
            .metrics
            .insert("close_bracket_accuracy".into(), acc.expectation);
    }
    Ok(())
}

fn construction(mode: Mode) -> Construction {
    match mode {
        Mode::Recognize => Construction::Recognizer,
        Mode::Generate => Construction::Generator,
    }
}

pub fn failures_path(args: &SweepArgs) -> PathBuf {
    args.failures
        .clone()
        .unwrap_or_else(|| args.out.with_extension("failures.jsonl"))
}

pub fn sweep(args: &SweepArgs) -> Result<()> {
    let to_u32 = |v: u64| {
        u32::try_from(v).map_err(|_| Error::InvalidInput(format!("{v} bits is out of range")))
    };
    let p_values = args
        .p_values
        .0
        .iter()
        .map(|&v| to_u32(v))
        .collect::<Result<Vec<_>>>()?;
    let n_values = args.n_values.0.iter().map(|&v| v as usize).collect();
    let mut grid = PrecisionSweep::new(p_values, n_values, args.trials);
    grid.rounding = args.rounding;
    let grid = run_sweep(construction(args.mode), args.k, args.depth, grid, args.seed)?;

    grid.write_csv(create(&args.out)?)?;
    let failures = failures_path(args);
    grid.write_failures_jsonl(create(&failures)?)?;

    let mut table: BTreeMap<u32, Vec<String>> = BTreeMap::new();
    for c in &grid.results {
        table
            .entry(c.p)
            .or_default()
            .push(format!("{:>8.3}", c.accuracy()));
    }
    let header: Vec<String> = grid.n_values.iter().map(|n| format!("{n:>8}")).collect();
    println!("accuracy by fractional bits (rows) and length (columns)");
    println!("{:>4} {}", "p", header.join(""));
    for (p, row) in table {
        println!("{p:>4} {}", row.join(""));
    }
    println!("wrote {} and {}", args.out.display(), failures.display());
    Ok(())
}

pub fn export_weights(args: &ExportArgs) -> Result<()> {
    let net = construction(args.mode).build(args.k, args.depth, args.n_max)?;
    let mut out = create(&args.out)?;
    out.write_all(net.to_json()?.as_bytes())?;
    out.write_all(b"\n")?;
    out.flush()?;
    println!(
        "wrote {}: {} layers, memory size {}",
        args.out.display(),
        net.layers.len(),
        net.memory_size()
    );
    Ok(())
}
