//! Text, JSON and CSV renderings of bench reports. The text layouts follow
//! the published accuracy/FPS and sampling-steps tables.

use serde::{Deserialize, Serialize};

use super::fps::{FpsReport, FpsRun};
use super::sweep::{BatchSweepReport, SweepReport};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ReportFormat {
    #[default]
    Text,
    Json,
    Csv,
}

impl std::str::FromStr for ReportFormat {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "text" | "txt" => Ok(ReportFormat::Text),
            "json" => Ok(ReportFormat::Json),
            "csv" => Ok(ReportFormat::Csv),
            other => Err(format!("unknown report format {other:?}")),
        }
    }
}

/// One method/pretraining row of the recognizer comparison table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccuracyRow {
    pub method: String,
    pub pretraining: Option<String>,
    pub accuracy_pct: f64,
    pub fps_infer_only: Option<f64>,
    pub fps_infer_and_load: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccuracyTable {
    pub rows: Vec<AccuracyRow>,
}

/// Output of `bench accuracy`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TopkReport {
    pub samples: usize,
    pub top1: f64,
    pub top5: f64,
}

/// Output of `bench fid`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FidReport {
    pub fid: f64,
    pub n_real: usize,
    pub n_generated: usize,
    pub dim: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "report", rename_all = "snake_case")]
pub enum BenchReport {
    AccuracyTable(AccuracyTable),
    Sweep(SweepReport),
    BatchSweep(BatchSweepReport),
    Fps(FpsRun),
    Topk(TopkReport),
    Fid(FidReport),
}

pub const ACCURACY_HEADERS: [&str; 5] =
    ["Method", "Pretraining Dataset", "Accuracy (%)", "FPS (infer only)", "FPS (infer & load data)"];
pub const SWEEP_HEADERS: [&str; 3] = ["Sampling steps", "FID Score", "Seconds per Batch"];

fn fmt_fid(v: f64) -> String {
    if v == 0.0 {
        "0".into()
    } else {
        format!("{v:.2}")
    }
}

fn opt(v: Option<f64>, f: impl Fn(f64) -> String) -> String {
    v.map(f).unwrap_or_default()
}

fn text_table(headers: &[&str], rows: &[Vec<String>]) -> String {
    let mut widths: Vec<usize> = headers.iter().map(|h| h.chars().count()).collect();
    for row in rows {
        for (w, cell) in widths.iter_mut().zip(row) {
            *w = (*w).max(cell.chars().count());
        }
    }
    let line = |cells: &mut dyn Iterator<Item = &str>| {
        let padded: Vec<String> = cells.zip(&widths).map(|(c, &w)| format!("{c:<w$}")).collect();
        format!("{}\n", padded.join(" | ").trim_end())
    };
    let mut out = line(&mut headers.iter().copied());
    for row in rows {
        out.push_str(&line(&mut row.iter().map(String::as_str)));
    }
    out
}

fn csv_table(headers: &[&str], rows: &[Vec<String>]) -> Vec<u8> {
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::CRLF).from_writer(Vec::new());
    w.write_record(headers).expect("in-memory write");
    for row in rows {
        w.write_record(row).expect("in-memory write");
    }
    w.into_inner().expect("in-memory flush")
}

struct Cells {
    text_headers: Vec<&'static str>,
    csv_headers: Vec<&'static str>,
    rows: Vec<Vec<String>>,
    // text view may blank repeated cells
    text_rows: Vec<Vec<String>>,
}

fn cells(report: &BenchReport) -> Cells {
    match report {
        BenchReport::AccuracyTable(t) => {
            let rows: Vec<Vec<String>> = t
                .rows
                .iter()
                .map(|r| {
                    vec![
                        r.method.clone(),
                        r.pretraining.clone().unwrap_or_default(),
                        format!("{:.1}", r.accuracy_pct),
                        opt(r.fps_infer_only, |v| format!("{v:.0}")),
                        opt(r.fps_infer_and_load, |v| format!("{v:.0}")),
                    ]
                })
                .collect();
            let mut text_rows = rows.clone();
            for row in &mut text_rows {
                if row[1].is_empty() {
                    row[1] = "-".into();
                }
            }
            for i in (1..text_rows.len()).rev() {
                if text_rows[i][0] == text_rows[i - 1][0] {
                    text_rows[i][0].clear();
                }
            }
            Cells {
                text_headers: ACCURACY_HEADERS.to_vec(),
                csv_headers: vec!["method", "pretraining", "accuracy_pct", "fps_infer_only", "fps_infer_and_load"],
                rows,
                text_rows,
            }
        }
        BenchReport::Sweep(s) => {
            let rows: Vec<Vec<String>> = s
                .rows
                .iter()
                .map(|r| {
                    vec![
                        r.steps.to_string(),
                        opt(r.fid, fmt_fid),
                        opt(r.seconds_per_batch, |v| format!("{v:.2}")),
                        r.error.clone().unwrap_or_default(),
                    ]
                })
                .collect();
            let text_rows = rows
                .iter()
                .zip(&s.rows)
                .map(|(cells, r)| {
                    let mut c = cells[..3].to_vec();
                    if r.failed() {
                        c.push(format!("failed: {}", cells[3]));
                    }
                    c
                })
                .collect();
            Cells {
                text_headers: SWEEP_HEADERS.to_vec(),
                csv_headers: vec!["steps", "fid", "seconds_per_batch", "error"],
                rows,
                text_rows,
            }
        }
        BenchReport::BatchSweep(b) => {
            let rows: Vec<Vec<String>> = b
                .rows
                .iter()
                .map(|r| {
                    vec![
                        format!("{}x{}", r.width, r.height),
                        r.k.to_string(),
                        opt(r.seconds_per_batch, |v| format!("{v:.2}")),
                        r.error.clone().unwrap_or_default(),
                    ]
                })
                .collect();
            Cells {
                text_headers: vec!["Resolution", "Batch size", "Seconds per Batch", "Error"],
                csv_headers: vec!["resolution", "k", "seconds_per_batch", "error"],
                text_rows: rows.clone(),
                rows,
            }
        }
        BenchReport::Fps(run) => {
            let row = |r: &FpsReport, name: &str| {
                vec![name.to_string(), r.frames.to_string(), format!("{:.3}", r.elapsed_s), format!("{:.0}", r.fps)]
            };
            let rows = vec![row(&run.infer_only, "infer only"), row(&run.infer_and_load, "infer & load data")];
            Cells {
                text_headers: vec!["Mode", "Frames", "Elapsed (s)", "FPS"],
                csv_headers: vec!["mode", "frames", "elapsed_s", "fps"],
                text_rows: rows.clone(),
                rows,
            }
        }
        BenchReport::Topk(t) => {
            let rows = vec![vec![t.samples.to_string(), format!("{:.1}", t.top1 * 100.0), format!("{:.1}", t.top5 * 100.0)]];
            Cells {
                text_headers: vec!["Samples", "Top-1 (%)", "Top-5 (%)"],
                csv_headers: vec!["samples", "top1", "top5"],
                text_rows: rows.clone(),
                rows,
            }
        }
        BenchReport::Fid(f) => {
            let rows = vec![vec![format!("{:?}", f.fid), f.n_real.to_string(), f.n_generated.to_string(), f.dim.to_string()]];
            Cells {
                text_headers: vec!["FID", "Real", "Generated", "Dim"],
                csv_headers: vec!["fid", "n_real", "n_generated", "dim"],
                text_rows: rows.clone(),
                rows,
            }
        }
    }
}

/// Renders `report`; JSON is compact canonical JSON of the report itself.
pub fn render_report(report: &BenchReport, format: ReportFormat) -> Vec<u8> {
    match format {
        ReportFormat::Json => serde_json::to_vec(report).expect("reports serialize"),
        ReportFormat::Text => {
            let c = cells(report);
            text_table(&c.text_headers, &c.text_rows).into_bytes()
        }
        ReportFormat::Csv => {
            let c = cells(report);
            csv_table(&c.csv_headers, &c.rows)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_sweep_is_header_only() {
        let r = BenchReport::Sweep(SweepReport {
            width: 512,
            height: 512,
            k: 8,
            prompt: "p".into(),
            seed: None,
            reference_steps: 50,
            rows: vec![],
        });
        let text = String::from_utf8(render_report(&r, ReportFormat::Text)).unwrap();
        assert_eq!(text, "Sampling steps | FID Score | Seconds per Batch\n");
        let csv = String::from_utf8(render_report(&r, ReportFormat::Csv)).unwrap();
        assert_eq!(csv, "steps,fid,seconds_per_batch,error\r\n");
    }

    #[test]
    fn fid_formatting() {
        assert_eq!(fmt_fid(0.0), "0");
        assert_eq!(fmt_fid(33.51), "33.51");
        assert_eq!(fmt_fid(30.4), "30.40");
    }

    #[test]
    fn csv_quotes_commas() {
        let r = BenchReport::BatchSweep(BatchSweepReport {
            steps: 20,
            prompt: "p".into(),
            seed: 0,
            rows: vec![super::super::sweep::BatchRow { width: 512, height: 512, k: 8, seconds_per_batch: None, error: Some("a, b".into()) }],
        });
        let csv = String::from_utf8(render_report(&r, ReportFormat::Csv)).unwrap();
        assert!(csv.ends_with("512x512,8,,\"a, b\"\r\n"));
    }

    #[test]
    fn format_parse() {
        assert_eq!("CSV".parse::<ReportFormat>().unwrap(), ReportFormat::Csv);
        assert!("xml".parse::<ReportFormat>().is_err());
    }
}
