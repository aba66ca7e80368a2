//! Robustness report files: the Success : Failure : Incorrect triple plus
//! a per-image log, in a round-trippable text format.

use std::io::Write;
use std::path::Path;

use glimpse_core::attack::{PerImageLog, RobustnessReport};

#[derive(Debug, thiserror::Error)]
pub enum ReportError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: malformed report: {what}")]
    Malformed { path: String, what: String },
}

/// Writes the summary triple and one log line per image.
pub fn write_report(
    path: &Path,
    attack: &str,
    epsilon: f64,
    report: &RobustnessReport,
    logs: &[PerImageLog],
) -> Result<(), ReportError> {
    let io = |e: std::io::Error| ReportError::Io { path: path.display().to_string(), source: e };
    let f = std::fs::File::create(path).map_err(io)?;
    let mut w = std::io::BufWriter::new(f);
    writeln!(w, "attack = {attack}").map_err(io)?;
    writeln!(w, "epsilon = {epsilon}").map_err(io)?;
    writeln!(w, "sample = {}", report.total()).map_err(io)?;
    writeln!(w, "Success : Failure : Incorrect").map_err(io)?;
    writeln!(w, "{} : {} : {}", report.success, report.failure, report.incorrect).map_err(io)?;
    writeln!(w, "index,seed,initially_correct,success").map_err(io)?;
    for l in logs {
        writeln!(
            w,
            "{},{},{},{}",
            l.index,
            l.seed,
            l.initially_correct,
            l.success.map_or("-".to_string(), |s| s.to_string())
        )
        .map_err(io)?;
    }
    w.flush().map_err(io)
}

/// Reads back the summary triple of a report file.
pub fn parse_report(path: &Path) -> Result<RobustnessReport, ReportError> {
    let text = std::fs::read_to_string(path).map_err(|e| ReportError::Io {
        path: path.display().to_string(),
        source: e,
    })?;
    let mut lines = text.lines();
    while let Some(line) = lines.next() {
        if line.trim() == "Success : Failure : Incorrect" {
            let counts = lines.next().ok_or_else(|| ReportError::Malformed {
                path: path.display().to_string(),
                what: "missing counts line".into(),
            })?;
            let parts: Vec<&str> = counts.split(':').map(str::trim).collect();
            if parts.len() != 3 {
                return Err(ReportError::Malformed {
                    path: path.display().to_string(),
                    what: format!("bad counts line `{counts}`"),
                });
            }
            let parse = |s: &str| {
                s.parse::<usize>().map_err(|_| ReportError::Malformed {
                    path: path.display().to_string(),
                    what: format!("bad count `{s}`"),
                })
            };
            return Ok(RobustnessReport {
                success: parse(parts[0])?,
                failure: parse(parts[1])?,
                incorrect: parse(parts[2])?,
            });
        }
    }
    Err(ReportError::Malformed {
        path: path.display().to_string(),
        what: "no summary triple found".into(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn report_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("report.txt");
        let report = RobustnessReport { success: 7, failure: 11, incorrect: 2 };
        let logs = vec![
            PerImageLog { index: 0, seed: 5, initially_correct: true, success: Some(false) },
            PerImageLog { index: 1, seed: 6, initially_correct: false, success: None },
        ];
        write_report(&p, "pgd", 2.0 / 255.0, &report, &logs).unwrap();
        let back = parse_report(&p).unwrap();
        assert_eq!(back, report);
    }

    #[test]
    fn malformed_report_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("report.txt");
        std::fs::write(&p, "not a report").unwrap();
        assert!(matches!(parse_report(&p), Err(ReportError::Malformed { .. })));
    }
}
