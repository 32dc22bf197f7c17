use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::transport::{CommLedger, Direction, LedgerEntry};

use super::config::ExperimentConfig;
use super::run::RoundRecord;

const MANIFEST: &str = "manifest.json";
const CONFIG: &str = "config.toml";
const ROUNDS: &str = "rounds.jsonl";
const SUMMARY: &str = "summary.json";
const LEDGER: &str = "ledger.csv";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub config_hash: String,
    pub seed: u64,
    pub code_version: String,
}

impl RunManifest {
    pub fn new(cfg: &ExperimentConfig) -> Self {
        RunManifest {
            config_hash: cfg.hash(),
            seed: cfg.experiment.seed,
            code_version: env!("CARGO_PKG_VERSION").to_string(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub rounds: usize,
    pub final_mean_iou: f64,
    pub final_mean_dice: f64,
    pub final_mean_train_loss: f64,
    pub comm_total: u64,
    /// closed-form communication cost for this configuration
    pub expected_comm_total: u64,
}

/// A finished run.
#[derive(Debug, Clone, PartialEq)]
pub struct ResultsStore {
    pub manifest: RunManifest,
    pub records: Vec<RoundRecord>,
    pub summary: Summary,
    pub ledger: CommLedger,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExportFormat {
    Csv,
    Jsonl,
}

impl std::str::FromStr for ExportFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "csv" => Ok(ExportFormat::Csv),
            "jsonl" => Ok(ExportFormat::Jsonl),
            other => Err(Error::invalid(format!("unknown export format `{other}`"))),
        }
    }
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::File::create(path)
        .and_then(|mut f| f.write_all(bytes))
        .map_err(|e| Error::io(path, e))
}

fn read_file(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn json_line<T: Serialize>(out: &mut Vec<u8>, value: &T) {
    serde_json::to_writer(&mut *out, value).expect("records serialize");
    out.push(b'\n');
}

fn parse_json<T: for<'de> Deserialize<'de>>(text: &str, path: &Path) -> Result<T> {
    serde_json::from_str(text).map_err(|e| Error::io(path, std::io::Error::other(e)))
}

fn csv_bytes(header: &[&str], rows: impl Iterator<Item = Vec<String>>) -> Vec<u8> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header).expect("in-memory csv");
    for row in rows {
        w.write_record(&row).expect("in-memory csv");
    }
    w.into_inner().expect("in-memory csv")
}

impl ResultsStore {
    /// Writes `manifest.json`, `config.toml`, `rounds.jsonl`, `summary.json`
    /// and `ledger.csv` into `dir`.
    pub fn save(&self, dir: &Path, cfg: &ExperimentConfig) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut manifest = serde_json::to_vec_pretty(&self.manifest).expect("manifest serializes");
        manifest.push(b'\n');
        write_file(&dir.join(MANIFEST), &manifest)?;
        write_file(&dir.join(CONFIG), cfg.to_toml_string().as_bytes())?;
        let mut rounds = Vec::new();
        for r in &self.records {
            json_line(&mut rounds, r);
        }
        write_file(&dir.join(ROUNDS), &rounds)?;
        let mut summary = serde_json::to_vec_pretty(&self.summary).expect("summary serializes");
        summary.push(b'\n');
        write_file(&dir.join(SUMMARY), &summary)?;
        let mut ledger = Vec::new();
        self.ledger.write_csv(&mut ledger)?;
        write_file(&dir.join(LEDGER), &ledger)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST);
        let manifest = parse_json(&read_file(&path)?, &path)?;
        let path = dir.join(ROUNDS);
        let records = read_file(&path)?
            .lines()
            .filter(|l| !l.is_empty())
            .map(|l| parse_json(l, &path))
            .collect::<Result<Vec<RoundRecord>>>()?;
        let path = dir.join(SUMMARY);
        let summary = parse_json(&read_file(&path)?, &path)?;
        let path = dir.join(LEDGER);
        let ledger = read_ledger(&path)?;
        Ok(ResultsStore {
            manifest,
            records,
            summary,
            ledger,
        })
    }

    /// Flat tables for plotting: per-round metrics plus a summary row,
    /// per-client metrics, collaboration matrices, layer shifts and the
    /// ledger. Returns the paths written.
    pub fn export(&self, out: &Path, format: ExportFormat) -> Result<Vec<PathBuf>> {
        fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
        let files = match format {
            ExportFormat::Csv => self.csv_tables(),
            ExportFormat::Jsonl => self.jsonl_tables(),
        };
        files
            .into_iter()
            .map(|(name, bytes)| {
                let path = out.join(name);
                write_file(&path, &bytes)?;
                Ok(path)
            })
            .collect()
    }

    fn csv_tables(&self) -> Vec<(&'static str, Vec<u8>)> {
        let s = &self.summary;
        let metrics = csv_bytes(
            &["row", "round", "mean_train_loss", "mean_iou", "mean_dice", "comm_total"],
            self.records
                .iter()
                .map(|r| {
                    vec![
                        "round".into(),
                        r.round.to_string(),
                        r.mean_train_loss.to_string(),
                        r.mean_iou.to_string(),
                        r.mean_dice.to_string(),
                        r.comm_total.to_string(),
                    ]
                })
                .chain(std::iter::once(vec![
                    "summary".into(),
                    s.rounds.to_string(),
                    s.final_mean_train_loss.to_string(),
                    s.final_mean_iou.to_string(),
                    s.final_mean_dice.to_string(),
                    s.comm_total.to_string(),
                ])),
        );
        let clients = csv_bytes(
            &["round", "client_id", "train_loss", "test_iou", "test_dice"],
            self.records.iter().flat_map(|r| {
                r.clients.iter().map(move |c| {
                    vec![
                        r.round.to_string(),
                        c.client_id.to_string(),
                        c.train_loss.to_string(),
                        c.test_iou.to_string(),
                        c.test_dice.to_string(),
                    ]
                })
            }),
        );
        let w = csv_bytes(
            &["round", "row", "col", "weight"],
            self.w_entries()
                .map(|(round, i, j, v)| vec![round.to_string(), i.to_string(), j.to_string(), v.to_string()]),
        );
        let shift = csv_bytes(
            &["round", "layer", "shift"],
            self.shift_entries()
                .map(|(round, k, v)| vec![round.to_string(), k.to_string(), v.to_string()]),
        );
        let mut ledger = Vec::new();
        self.ledger.write_csv(&mut ledger).expect("in-memory csv");
        vec![
            ("metrics.csv", metrics),
            ("clients.csv", clients),
            ("w.csv", w),
            ("shift.csv", shift),
            ("ledger.csv", ledger),
        ]
    }

    fn jsonl_tables(&self) -> Vec<(&'static str, Vec<u8>)> {
        let mut metrics = Vec::new();
        for r in &self.records {
            json_line(
                &mut metrics,
                &serde_json::json!({
                    "row": "round",
                    "round": r.round,
                    "mean_train_loss": r.mean_train_loss,
                    "mean_iou": r.mean_iou,
                    "mean_dice": r.mean_dice,
                    "comm_total": r.comm_total,
                    "clients": r.clients,
                }),
            );
        }
        json_line(&mut metrics, &serde_json::json!({ "row": "summary", "summary": self.summary }));
        let mut w = Vec::new();
        for r in &self.records {
            if let Some(rows) = &r.w {
                json_line(&mut w, &serde_json::json!({ "round": r.round, "w": rows }));
            }
        }
        let mut shift = Vec::new();
        for r in &self.records {
            json_line(&mut shift, &serde_json::json!({ "round": r.round, "layer_shift": r.layer_shift }));
        }
        let mut ledger = Vec::new();
        for e in self.ledger.entries() {
            json_line(&mut ledger, e);
        }
        vec![
            ("metrics.jsonl", metrics),
            ("w.jsonl", w),
            ("shift.jsonl", shift),
            ("ledger.jsonl", ledger),
        ]
    }

    fn w_entries(&self) -> impl Iterator<Item = (usize, usize, usize, f64)> + '_ {
        self.records.iter().flat_map(|r| {
            r.w.iter().flat_map(move |rows| {
                rows.iter().enumerate().flat_map(move |(i, row)| {
                    row.iter().enumerate().map(move |(j, &v)| (r.round, i, j, v))
                })
            })
        })
    }

    fn shift_entries(&self) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
        self.records.iter().flat_map(|r| {
            r.layer_shift
                .iter()
                .enumerate()
                .map(move |(k, &v)| (r.round, k + 1, v))
        })
    }
}

fn read_ledger(path: &Path) -> Result<CommLedger> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| Error::io(path, std::io::Error::other(e)))?;
    let mut entries = Vec::new();
    for row in reader.records() {
        let row = row.map_err(|e| Error::io(path, std::io::Error::other(e)))?;
        let field = |i: usize| row.get(i).unwrap_or("");
        let bad = |what: &str| Error::decode("ledger", format!("bad {what} in {}", path.display()));
        entries.push(LedgerEntry {
            round: field(0).parse().map_err(|_| bad("round"))?,
            direction: match field(1) {
                "upload" => Direction::Upload,
                "broadcast" => Direction::Broadcast,
                _ => return Err(bad("direction")),
            },
            client_id: field(2).parse().map_err(|_| bad("client_id"))?,
            scalar_count: field(3).parse().map_err(|_| bad("scalar_count"))?,
        });
    }
    Ok(CommLedger::from_entries(entries))
}
