use std::fmt::Write as _;
use std::str::FromStr;

use super::TrainError;

pub const METRICS_HEADER: &str = "step,tokens_seen,seq_len,loss,lr,eval_ppl,eval_acc";

/// One optimizer step. Evaluation columns are filled at milestones only.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRow {
    pub step: u64,
    /// Tokens trained on after this step.
    pub tokens_seen: u64,
    pub seq_len: usize,
    pub loss: f64,
    pub lr: f64,
    pub eval_ppl: Option<f64>,
    pub eval_acc: Option<f64>,
}

impl MetricsRow {
    pub fn to_csv_line(&self) -> String {
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        format!(
            "{},{},{},{},{},{},{}",
            self.step,
            self.tokens_seen,
            self.seq_len,
            self.loss,
            self.lr,
            opt(self.eval_ppl),
            opt(self.eval_acc)
        )
    }

    pub fn parse_csv_line(line: &str, line_no: usize) -> Result<Self, TrainError> {
        let bad = |msg: String| TrainError::Csv { line: line_no, msg };
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 7 {
            return Err(bad(format!("expected 7 fields, found {}", fields.len())));
        }
        fn num<T: FromStr>(s: &str, name: &str, line_no: usize) -> Result<T, TrainError> {
            s.trim().parse().map_err(|_| TrainError::Csv {
                line: line_no,
                msg: format!("{name}: cannot parse {s:?}"),
            })
        }
        let opt = |s: &str, name: &str| -> Result<Option<f64>, TrainError> {
            if s.trim().is_empty() {
                Ok(None)
            } else {
                num(s, name, line_no).map(Some)
            }
        };
        Ok(Self {
            step: num(fields[0], "step", line_no)?,
            tokens_seen: num(fields[1], "tokens_seen", line_no)?,
            seq_len: num(fields[2], "seq_len", line_no)?,
            loss: num(fields[3], "loss", line_no)?,
            lr: num(fields[4], "lr", line_no)?,
            eval_ppl: opt(fields[5], "eval_ppl")?,
            eval_acc: opt(fields[6], "eval_acc")?,
        })
    }
}

pub fn render_csv(rows: &[MetricsRow]) -> String {
    let mut out = format!("{METRICS_HEADER}\n");
    for r in rows {
        let _ = writeln!(out, "{}", r.to_csv_line());
    }
    out
}

/// Parses a metrics file; the first line must be the header.
pub fn parse_csv(text: &str) -> Result<Vec<MetricsRow>, TrainError> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h.trim() == METRICS_HEADER => {}
        _ => {
            return Err(TrainError::Csv {
                line: 1,
                msg: format!("expected header {METRICS_HEADER:?}"),
            })
        }
    }
    lines
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| MetricsRow::parse_csv_line(l, i + 1))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip() {
        let rows = vec![
            MetricsRow {
                step: 1,
                tokens_seen: 8192,
                seq_len: 128,
                loss: 5.123456789012345,
                lr: 3e-4,
                eval_ppl: None,
                eval_acc: None,
            },
            MetricsRow {
                step: 2,
                tokens_seen: 16384,
                seq_len: 256,
                loss: 4.0,
                lr: 2.9e-4,
                eval_ppl: Some(80.5),
                eval_acc: Some(0.25),
            },
        ];
        let text = render_csv(&rows);
        assert!(text.starts_with("step,tokens_seen,seq_len,loss,lr,eval_ppl,eval_acc\n1,8192,128,"));
        assert_eq!(parse_csv(&text).unwrap(), rows);
    }

    #[test]
    fn errors_name_the_line() {
        let text = format!("{METRICS_HEADER}\n1,2,3,4,5,,\n1,2,x,4,5,,\n");
        match parse_csv(&text) {
            Err(TrainError::Csv { line, .. }) => assert_eq!(line, 3),
            other => panic!("{other:?}"),
        }
        assert!(matches!(parse_csv("nope\n"), Err(TrainError::Csv { line: 1, .. })));
        assert!(matches!(parse_csv(&format!("{METRICS_HEADER}\n1,2\n")), Err(TrainError::Csv { line: 2, .. })));
    }
}
