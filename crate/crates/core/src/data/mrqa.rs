//! MRQA shared-task line format: an optional `{"header": …}` line, then one
//! context per line with its questions nested under `qas`.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::tokenize::tokenize_with_offsets;
use super::{char_to_token_span, RawAnswer, RawDomain, RawRecord, Split};
use crate::error::{Error, Result};

#[derive(Debug, Serialize, Deserialize)]
struct MrqaLine {
    #[serde(default)]
    id: Option<String>,
    context: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    context_tokens: Vec<(String, usize)>,
    qas: Vec<MrqaQa>,
}

#[derive(Debug, Serialize, Deserialize)]
struct MrqaQa {
    #[serde(default, alias = "id")]
    qid: Option<String>,
    question: String,
    #[serde(default)]
    answers: Vec<String>,
    #[serde(default)]
    detected_answers: Vec<MrqaAnswer>,
}

#[derive(Debug, Serialize, Deserialize)]
struct MrqaAnswer {
    text: String,
    #[serde(default)]
    char_spans: Vec<[usize; 2]>,
    #[serde(default)]
    token_spans: Vec<[usize; 2]>,
}

/// Header fields this crate reads or writes.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Header {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dataset: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub domain: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub split: Option<Split>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct LoadReport {
    pub header: Option<Header>,
    pub records: Vec<RawRecord>,
    /// Questions dropped because no answer carried a usable span.
    pub skipped_no_span: usize,
}

/// Reads an MRQA-format file. `source_tag` overrides the header's dataset
/// name; without either, the file stem is used.
pub fn load_jsonl(path: &Path, source_tag: Option<&str>) -> Result<LoadReport> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut report = LoadReport::default();
    let stem = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line_no = i + 1;
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let malformed = |message: String| Error::MalformedLine {
            path: path.to_path_buf(),
            line: line_no,
            message,
        };
        let value: Value = serde_json::from_str(&line).map_err(|e| malformed(e.to_string()))?;
        if let Some(h) = value.get("header") {
            let header: Header =
                serde_json::from_value(h.clone()).map_err(|e| malformed(e.to_string()))?;
            report.header = Some(header);
            continue;
        }
        let entry: MrqaLine =
            serde_json::from_value(value).map_err(|e| malformed(e.to_string()))?;
        let tag = source_tag
            .map(str::to_string)
            .or_else(|| report.header.as_ref().and_then(|h| h.dataset.clone()))
            .unwrap_or_else(|| stem.clone());
        let ctx_len = entry.context.chars().count();
        for (q_index, qa) in entry.qas.iter().enumerate() {
            let mut answers = Vec::new();
            for det in &qa.detected_answers {
                for span in resolve_spans(det, &entry.context_tokens) {
                    if span.0 > span.1 || span.1 >= ctx_len {
                        return Err(malformed(format!(
                            "answer span {span:?} outside context of {ctx_len} characters"
                        )));
                    }
                    answers.push(RawAnswer {
                        text: det.text.clone(),
                        char_span: Some(span),
                    });
                }
            }
            if answers.is_empty() {
                report.skipped_no_span += 1;
                continue;
            }
            for text in &qa.answers {
                if !answers.iter().any(|a| &a.text == text) {
                    answers.push(RawAnswer {
                        text: text.clone(),
                        char_span: None,
                    });
                }
            }
            let id = qa.qid.clone().unwrap_or_else(|| {
                format!(
                    "{}-{line_no}-{q_index}",
                    entry.id.clone().unwrap_or_else(|| tag.clone())
                )
            });
            report.records.push(RawRecord {
                id,
                context: entry.context.clone(),
                question: qa.question.clone(),
                answers,
                source_tag: tag.clone(),
            });
        }
    }
    if report.skipped_no_span > 0 {
        log_skip(path, report.skipped_no_span);
    }
    Ok(report)
}

fn log_skip(path: &Path, n: usize) {
    eprintln!(
        "warning: {}: skipped {n} question(s) without answer spans",
        path.display()
    );
}

/// Character spans of one detected answer. Token spans are translated
/// through `context_tokens` offsets when no character span is given.
fn resolve_spans(det: &MrqaAnswer, context_tokens: &[(String, usize)]) -> Vec<(usize, usize)> {
    if !det.char_spans.is_empty() {
        return det.char_spans.iter().map(|s| (s[0], s[1])).collect();
    }
    det.token_spans
        .iter()
        .filter_map(|s| {
            let (first, last) = (context_tokens.get(s[0])?, context_tokens.get(s[1])?);
            let end = last.1 + last.0.chars().count().max(1) - 1;
            Some((first.1, end))
        })
        .collect()
}

fn record_line(r: &RawRecord) -> MrqaLine {
    let tokens = tokenize_with_offsets(&r.context);
    let chars: Vec<char> = r.context.chars().collect();
    let context_tokens = tokens
        .iter()
        .map(|t| (chars[t.start..t.end].iter().collect(), t.start))
        .collect();
    let detected_answers = r
        .answers
        .iter()
        .filter_map(|a| {
            let span = a.char_span?;
            let tok = char_to_token_span(&tokens, span);
            Some(MrqaAnswer {
                text: a.text.clone(),
                char_spans: vec![[span.0, span.1]],
                token_spans: tok.map(|t| vec![[t.0, t.1]]).unwrap_or_default(),
            })
        })
        .collect();
    let mut answers: Vec<String> = Vec::new();
    for a in &r.answers {
        if !answers.contains(&a.text) {
            answers.push(a.text.clone());
        }
    }
    MrqaLine {
        id: None,
        context: r.context.clone(),
        context_tokens,
        qas: vec![MrqaQa {
            qid: Some(r.id.clone()),
            question: r.question.clone(),
            answers,
            detected_answers,
        }],
    }
}

/// Writes one split of a domain: a header line naming the domain, then one
/// MRQA line per record.
pub fn write_domain_file(
    path: &Path,
    domain: &str,
    split: Split,
    records: &[RawRecord],
) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let header = Header {
        dataset: records.first().map(|r| r.source_tag.clone()),
        domain: Some(domain.to_string()),
        split: Some(split),
    };
    let head = serde_json::json!({ "header": header });
    writeln!(w, "{head}").map_err(|e| Error::io(path, e))?;
    for r in records {
        let line = serde_json::to_string(&record_line(r))?;
        writeln!(w, "{line}").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn domain_file_name(index: usize, domain: &str, split: Split) -> String {
    format!("{:02}_{domain}.{}.jsonl", index + 1, split.name())
}

/// Writes `NN_<domain>.train.jsonl` / `.test.jsonl` pairs into `dir`.
pub fn write_domains(dir: &Path, domains: &[RawDomain]) -> Result<Vec<std::path::PathBuf>> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut written = Vec::new();
    for (i, d) in domains.iter().enumerate() {
        for (split, recs) in [(Split::Train, &d.train), (Split::Test, &d.test)] {
            let p = dir.join(domain_file_name(i, &d.name, split));
            write_domain_file(&p, &d.name, split, recs)?;
            written.push(p);
        }
    }
    Ok(written)
}

/// Reads domain files written by [`write_domains`], ordered by their
/// numeric prefix.
pub fn read_domains(dir: &Path) -> Result<Vec<RawDomain>> {
    let mut files: Vec<_> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "jsonl"))
        .collect();
    files.sort();
    let mut domains: Vec<RawDomain> = Vec::new();
    for f in files {
        let report = load_jsonl(&f, None)?;
        let header = report.header.unwrap_or_default();
        let (Some(name), Some(split)) = (header.domain, header.split) else {
            return Err(Error::Data(format!(
                "{} has no domain header line",
                f.display()
            )));
        };
        let idx = match domains.iter().position(|d| d.name == name) {
            Some(i) => i,
            None => {
                domains.push(RawDomain {
                    name: name.clone(),
                    train: Vec::new(),
                    test: Vec::new(),
                });
                domains.len() - 1
            }
        };
        match split {
            Split::Train => domains[idx].train.extend(report.records),
            Split::Test => domains[idx].test.extend(report.records),
        }
    }
    if domains.is_empty() {
        return Err(Error::Data(format!("no domain files in {}", dir.display())));
    }
    Ok(domains)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write(dir: &Path, name: &str, body: &str) -> std::path::PathBuf {
        let p = dir.join(name);
        let mut f = File::create(&p).unwrap();
        f.write_all(body.as_bytes()).unwrap();
        p
    }

    #[test]
    fn loads_mrqa_lines_with_header() {
        let dir = tempfile::tempdir().unwrap();
        let body = r#"{"header": {"dataset": "SQuAD", "split": "train"}}
{"context": "Paris is in France.", "context_tokens": [["Paris", 0], ["is", 6], ["in", 9], ["France", 12], [".", 18]], "qas": [{"qid": "q1", "question": "Where is Paris?", "answers": ["France"], "detected_answers": [{"text": "France", "char_spans": [[12, 17]], "token_spans": [[3, 3]]}]}, {"qid": "q2", "question": "What is in France?", "answers": ["Paris"], "detected_answers": [{"text": "Paris", "token_spans": [[0, 0]]}]}, {"qid": "q3", "question": "Unanswered?", "answers": ["x"], "detected_answers": []}]}
"#;
        let p = write(dir.path(), "squad.jsonl", body);
        let rep = load_jsonl(&p, None).unwrap();
        assert_eq!(rep.records.len(), 2);
        assert_eq!(rep.skipped_no_span, 1);
        assert_eq!(rep.records[0].source_tag, "SQuAD");
        assert_eq!(rep.records[0].answers[0].char_span, Some((12, 17)));
        assert_eq!(rep.records[1].answers[0].char_span, Some((0, 4)));
        let rep = load_jsonl(&p, Some("wiki")).unwrap();
        assert_eq!(rep.records[0].source_tag, "wiki");
    }

    #[test]
    fn malformed_line_reports_line_number() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(
            dir.path(),
            "bad.jsonl",
            "{\"context\": \"a\", \"qas\": []}\n{oops\n",
        );
        match load_jsonl(&p, None) {
            Err(Error::MalformedLine { line, .. }) => assert_eq!(line, 2),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn domain_files_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let rec = RawRecord {
            id: "a1".into(),
            context: "Ada wrote notes, famously.".into(),
            question: "Who wrote notes?".into(),
            answers: vec![RawAnswer {
                text: "Ada".into(),
                char_span: Some((0, 2)),
            }],
            source_tag: "wiki".into(),
        };
        let domains = vec![RawDomain {
            name: "who".into(),
            train: vec![rec.clone()],
            test: vec![rec.clone()],
        }];
        let files = write_domains(dir.path(), &domains).unwrap();
        assert_eq!(files.len(), 2);
        let back = read_domains(dir.path()).unwrap();
        assert_eq!(back, domains);
    }
}
