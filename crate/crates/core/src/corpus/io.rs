//! Plain-text corpus files. The first line is a header
//! `lang=<id> type=<mono|parallel>` (parallel files add `tgt=<id>`); each
//! further line is one example: space-separated ids for mono, or
//! `src ||| tgt ||| i-j i-j …` for parallel.

use std::fs;
use std::path::Path;

use super::batch::MonoSentence;
use super::language::ParallelExample;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum CorpusFile {
    Mono { language: usize, sentences: Vec<Vec<usize>> },
    Parallel { source: usize, target: usize, examples: Vec<ParallelExample> },
}

impl CorpusFile {
    pub fn mono_sentences(&self) -> Vec<MonoSentence> {
        match self {
            Self::Mono { language, sentences } => sentences
                .iter()
                .map(|s| MonoSentence {
                    language: *language,
                    tokens: s.clone(),
                })
                .collect(),
            Self::Parallel { .. } => Vec::new(),
        }
    }

    pub fn to_text(&self) -> String {
        let ids = |s: &[usize]| s.iter().map(usize::to_string).collect::<Vec<_>>().join(" ");
        let mut out = String::new();
        match self {
            Self::Mono { language, sentences } => {
                out.push_str(&format!("lang={language} type=mono\n"));
                for s in sentences {
                    out.push_str(&ids(s));
                    out.push('\n');
                }
            }
            Self::Parallel { source, target, examples } => {
                out.push_str(&format!("lang={source} type=parallel tgt={target}\n"));
                for e in examples {
                    let gold: Vec<String> = e.gold.iter().map(|(i, j)| format!("{i}-{j}")).collect();
                    out.push_str(&format!("{} ||| {} ||| {}\n", ids(&e.source), ids(&e.target), gold.join(" ")));
                }
            }
        }
        out
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        let header = lines.next().ok_or_else(|| Error::Corpus("empty corpus file".into()))?;
        let mut lang = None;
        let mut kind = None;
        let mut tgt = None;
        for field in header.split_whitespace() {
            match field.split_once('=') {
                Some(("lang", v)) => lang = Some(num(v, 0)?),
                Some(("type", v)) => kind = Some(v.to_string()),
                Some(("tgt", v)) => tgt = Some(num(v, 0)?),
                _ => return Err(Error::Corpus(format!("bad header field `{field}`"))),
            }
        }
        let lang = lang.ok_or_else(|| Error::Corpus("header lacks lang=".into()))?;
        let body = lines.enumerate().filter(|(_, l)| !l.trim().is_empty());
        match kind.as_deref() {
            Some("mono") => {
                let sentences = body.map(|(i, l)| ids(l, i + 2)).collect::<Result<_>>()?;
                Ok(Self::Mono { language: lang, sentences })
            }
            Some("parallel") => {
                let target = tgt.unwrap_or(lang);
                let examples = body
                    .map(|(i, l)| {
                        let line = i + 2;
                        let parts: Vec<&str> = l.split("|||").collect();
                        if parts.len() != 3 {
                            return Err(Error::Corpus(format!("line {line}: expected `src ||| tgt ||| align`")));
                        }
                        let gold = parts[2]
                            .split_whitespace()
                            .map(|p| {
                                let (a, b) = p
                                    .split_once('-')
                                    .ok_or_else(|| Error::Corpus(format!("line {line}: bad pair `{p}`")))?;
                                Ok((num(a, line)?, num(b, line)?))
                            })
                            .collect::<Result<Vec<_>>>()?;
                        let e = ParallelExample {
                            source: ids(parts[0], line)?,
                            target: ids(parts[1], line)?,
                            gold,
                            source_language: lang,
                            target_language: target,
                        };
                        if e.gold.iter().any(|&(i, j)| i >= e.source.len() || j >= e.target.len()) {
                            return Err(Error::Corpus(format!("line {line}: alignment outside the sentences")));
                        }
                        Ok(e)
                    })
                    .collect::<Result<_>>()?;
                Ok(Self::Parallel { source: lang, target, examples })
            }
            other => Err(Error::Corpus(format!("unknown corpus type {other:?}"))),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&fs::read_to_string(path)?)
    }
}

fn num(s: &str, line: usize) -> Result<usize> {
    s.trim()
        .parse()
        .map_err(|_| Error::Corpus(format!("line {line}: `{s}` is not an id")))
}

fn ids(s: &str, line: usize) -> Result<Vec<usize>> {
    s.split_whitespace().map(|t| num(t, line)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trips() {
        let mono = CorpusFile::Mono {
            language: 2,
            sentences: vec![vec![5, 6], vec![7]],
        };
        assert_eq!(CorpusFile::parse(&mono.to_text()).unwrap(), mono);
        let par = CorpusFile::Parallel {
            source: 0,
            target: 2,
            examples: vec![ParallelExample {
                source: vec![5, 6],
                target: vec![9, 8],
                gold: vec![(0, 1), (1, 0)],
                source_language: 0,
                target_language: 2,
            }],
        };
        let text = par.to_text();
        assert_eq!(text, "lang=0 type=parallel tgt=2\n5 6 ||| 9 8 ||| 0-1 1-0\n");
        assert_eq!(CorpusFile::parse(&text).unwrap(), par);
    }

    #[test]
    fn malformed_files_are_corpus_errors() {
        for bad in ["", "type=mono\n1", "lang=0 type=mono\n1 x", "lang=0 type=parallel\n1 ||| 2", "lang=0 type=parallel\n1 ||| 2 ||| 3-0"] {
            assert!(matches!(CorpusFile::parse(bad), Err(Error::Corpus(_))), "{bad:?}");
        }
    }
}
