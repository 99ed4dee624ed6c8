//! Evaluation reports shaped like a robust-accuracy table.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One attack column of a row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackColumn {
    pub attack: String,
    pub robust: f64,
}

/// One evaluated pipeline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub model: String,
    pub clean: f64,
    pub per_attack: Vec<AttackColumn>,
    /// Per-example worst case: robust only if the example survived every
    /// attack in the list.
    pub combined: f64,
}

/// Deterministic run parameters recorded with the results. Wall-clock timing
/// is deliberately excluded so reports are a pure function of the config.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMeta {
    pub config_digest: String,
    pub library_version: String,
    pub num_eval: usize,
    pub epsilon: f64,
    pub attacks: Vec<String>,
    pub white_box_mode: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub meta: RunMeta,
    pub rows: Vec<ReportRow>,
}

/// Survival bitmap for one (model, attack) pair; `'1'` = example survived.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BitmapRecord {
    pub model: String,
    pub attack: String,
    pub survived: String,
}

impl BitmapRecord {
    pub fn new(model: &str, attack: &str, bits: &[bool]) -> Self {
        Self {
            model: model.to_string(),
            attack: attack.to_string(),
            survived: bits.iter().map(|&b| if b { '1' } else { '0' }).collect(),
        }
    }

    pub fn bits(&self) -> Vec<bool> {
        self.survived.chars().map(|c| c == '1').collect()
    }
}

impl EvalReport {
    /// Percentages in range and combined no larger than any per-attack column.
    pub fn validate(&self) -> Result<()> {
        for row in &self.rows {
            let mut all = vec![row.clean, row.combined];
            all.extend(row.per_attack.iter().map(|c| c.robust));
            if all.iter().any(|p| !(0.0..=100.0).contains(p)) {
                return Err(Error::Data(format!(
                    "row '{}' has a percentage outside [0, 100]",
                    row.model
                )));
            }
            for col in &row.per_attack {
                if row.combined > col.robust + 1e-9 {
                    return Err(Error::Data(format!(
                        "row '{}': combined {} exceeds {} column {}",
                        row.model, row.combined, col.attack, col.robust
                    )));
                }
            }
        }
        Ok(())
    }

    /// Human-readable table.
    pub fn render_table(&self) -> String {
        let mut out = String::new();
        let attack_names: Vec<&str> = self
            .rows
            .first()
            .map(|r| r.per_attack.iter().map(|c| c.attack.as_str()).collect())
            .unwrap_or_default();
        out.push_str(&format!(
            "Robust accuracy (%) | eps = {:.6} | n = {} | white-box mode: {}\n",
            self.meta.epsilon, self.meta.num_eval, self.meta.white_box_mode
        ));
        out.push_str(&format!("{:<18} {:>9}", "Model", "Clean"));
        for a in &attack_names {
            out.push_str(&format!(" {:>9}", a));
        }
        out.push_str(&format!(" {:>9}\n", "Combined"));
        let width = 18 + 10 * (attack_names.len() + 2);
        out.push_str(&"-".repeat(width));
        out.push('\n');
        for row in &self.rows {
            out.push_str(&format!("{:<18} {:>9.2}", row.model, row.clean));
            for col in &row.per_attack {
                out.push_str(&format!(" {:>9.2}", col.robust));
            }
            out.push_str(&format!(" {:>9.2}\n", row.combined));
        }
        out.push_str(&format!("config digest: {}\n", self.meta.config_digest));
        out
    }

    /// Line-delimited records: one meta line, then one line per row.
    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        out.push_str(&serde_json::to_string(&JsonlLine::Meta(&self.meta)).map_err(json_err)?);
        out.push('\n');
        for row in &self.rows {
            out.push_str(&serde_json::to_string(&JsonlLine::Row(row)).map_err(json_err)?);
            out.push('\n');
        }
        Ok(out)
    }

    /// Comma-separated summary with fixed 4-decimal percentages.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("model,clean");
        if let Some(first) = self.rows.first() {
            for col in &first.per_attack {
                out.push(',');
                out.push_str(&col.attack);
            }
        }
        out.push_str(",combined\n");
        for row in &self.rows {
            out.push_str(&format!("{},{:.4}", row.model, row.clean));
            for col in &row.per_attack {
                out.push_str(&format!(",{:.4}", col.robust));
            }
            out.push_str(&format!(",{:.4}\n", row.combined));
        }
        out
    }
}

fn json_err(e: serde_json::Error) -> Error {
    Error::Data(e.to_string())
}

#[derive(Serialize)]
#[serde(tag = "type", rename_all = "lowercase")]
enum JsonlLine<'a> {
    Meta(&'a RunMeta),
    Row(&'a ReportRow),
}

/// Failure marker appended when an experiment aborts after partial results.
#[derive(Debug, Serialize)]
pub struct FailureMarker<'a> {
    pub r#type: &'a str,
    pub error: String,
}
