//! Corpus files: a `# k=<k> D=<D> seed=<seed>` header followed by one string
//! per line, tokens written as space-separated integer codes.

use std::io::{BufRead, Write};

use crate::dyck::Token;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CorpusHeader {
    pub k: u32,
    pub depth: u32,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Corpus {
    pub header: CorpusHeader,
    pub strings: Vec<Vec<Token>>,
}

pub fn write_corpus<W, S>(mut out: W, header: &CorpusHeader, strings: S) -> Result<()>
where
    W: Write,
    S: IntoIterator,
    S::Item: AsRef<[Token]>,
{
    writeln!(
        out,
        "# k={} D={} seed={}",
        header.k, header.depth, header.seed
    )?;
    for s in strings {
        let line = s
            .as_ref()
            .iter()
            .map(|t| t.id().to_string())
            .collect::<Vec<_>>()
            .join(" ");
        writeln!(out, "{line}")?;
    }
    out.flush()?;
    Ok(())
}

fn parse_header(line: &str) -> Option<CorpusHeader> {
    let rest = line.strip_prefix('#')?;
    let (mut k, mut depth, mut seed) = (None, None, None);
    for field in rest.split_whitespace() {
        let (key, value) = field.split_once('=')?;
        match key {
            "k" => k = value.parse().ok(),
            "D" => depth = value.parse().ok(),
            "seed" => seed = value.parse().ok(),
            _ => {}
        }
    }
    Some(CorpusHeader {
        k: k?,
        depth: depth?,
        seed: seed?,
    })
}

pub fn read_corpus<R: BufRead>(input: R) -> Result<Corpus> {
    let mut lines = input.lines().enumerate();
    let header = match lines.next() {
        Some((_, line)) => parse_header(&line?).ok_or_else(|| Error::Parse {
            line: 1,
            message: "expected header `# k=<k> D=<D> seed=<seed>`".into(),
        })?,
        None => {
            return Err(Error::Parse {
                line: 1,
                message: "empty corpus file".into(),
            })
        }
    };

    let mut strings = Vec::new();
    for (idx, line) in lines {
        let line = line?;
        let lineno = idx + 1;
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let mut tokens = Vec::new();
        for field in line.split_whitespace() {
            let id: usize = field.parse().map_err(|_| Error::Parse {
                line: lineno,
                message: format!("`{field}` is not a token code"),
            })?;
            let tok = Token::from_id(id).filter(|t| t.in_vocabulary(header.k));
            tokens.push(tok.ok_or_else(|| Error::Parse {
                line: lineno,
                message: format!(
                    "token code {id} is outside the vocabulary for k={}",
                    header.k
                ),
            })?);
        }
        strings.push(tokens);
    }
    Ok(Corpus { header, strings })
}
