//! Experiment orchestration: trains the baseline and the ensemble, runs the
//! attack suite against every pipeline, and emits the report files.

use std::fs;
use std::path::PathBuf;

use rayon::prelude::*;

use crate::attacks::{worst_case_eval, AttackConfig};
use crate::ensemble::build_ensemble;
use crate::error::{Error, Result};
use crate::harness::config::{DatasetConfig, ExperimentConfig};
use crate::harness::dataset::{gen_synthetic_split, load_cifar10_binary, Dataset, Split};
use crate::harness::report::{
    AttackColumn, BitmapRecord, EvalReport, FailureMarker, ReportRow, RunMeta,
};
use crate::model::{argmax, train_submodel};
use crate::pipeline::{Oracle, Pipeline, RandomEnsemblePipeline, SimpleEnsemblePipeline, SingleModelPipeline};
use crate::rng::RngStream;
use crate::transform::ShuffleKey;

/// Clean accuracy (%) with one seeded prediction draw per example.
pub fn evaluate_clean(oracle: &dyn Oracle, dataset: &Dataset, seed: u64) -> Result<f64> {
    if dataset.is_empty() {
        return Err(Error::Data("clean evaluation needs examples".into()));
    }
    let root = RngStream::new(seed);
    let correct: usize = (0..dataset.len())
        .into_par_iter()
        .map(|i| -> Result<usize> {
            let mut rng = root.derive_indexed("clean-example", i);
            let probs = oracle.probs(&dataset.images()[i], &mut rng)?;
            Ok(usize::from(argmax(&probs) == dataset.labels()[i]))
        })
        .try_reduce(|| 0, |a, b| Ok(a + b))?;
    Ok(100.0 * correct as f64 / dataset.len() as f64)
}

/// Everything a finished experiment produced.
#[derive(Debug)]
pub struct ExperimentOutput {
    pub report: EvalReport,
    /// Human-readable table, ready for standard output.
    pub table: String,
    pub files: WrittenFiles,
}

#[derive(Debug)]
pub struct WrittenFiles {
    pub report_jsonl: PathBuf,
    pub summary_csv: PathBuf,
    pub outcomes_jsonl: PathBuf,
    pub config_copy: PathBuf,
}

fn load_datasets(cfg: &ExperimentConfig) -> Result<(Dataset, Dataset)> {
    match &cfg.dataset {
        DatasetConfig::Synthetic { .. } => {
            let (train_spec, test_spec) = cfg.synthetic_spec(None).unwrap();
            Ok((
                gen_synthetic_split(&train_spec, Split::Train)?,
                gen_synthetic_split(&test_spec, Split::Test)?,
            ))
        }
        DatasetConfig::Cifar10 {
            train_path,
            test_path,
        } => Ok((
            load_cifar10_binary(train_path)?,
            load_cifar10_binary(test_path)?,
        )),
    }
}

/// Runs the full pipeline: baseline model, simple ensemble, random ensemble,
/// attack suite on each, report emission.
///
/// Reports are a pure function of the config: rerunning an identical config
/// produces byte-identical report files. On failure, rows finished so far are
/// flushed to the report file with a failure marker before the error returns.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentOutput> {
    cfg.validate()?;
    fs::create_dir_all(&cfg.output.dir)?;
    let digest = cfg.digest()?;

    let mut rows: Vec<ReportRow> = Vec::new();
    let mut bitmaps: Vec<BitmapRecord> = Vec::new();
    let meta = RunMeta {
        config_digest: digest,
        library_version: env!("CARGO_PKG_VERSION").to_string(),
        num_eval: cfg.attack.num_eval,
        epsilon: cfg.attack.epsilon,
        attacks: cfg.attack.attacks.clone(),
        white_box_mode: cfg.attack.white_box_mode.as_str().to_string(),
    };

    let result = run_rows(cfg, &mut rows, &mut bitmaps);

    let report = EvalReport {
        meta,
        rows: rows.clone(),
    };
    let report_jsonl = cfg.output.dir.join("report.jsonl");

    if let Err(e) = result {
        // Flush partial results with a failure marker.
        let mut text = report.to_jsonl().unwrap_or_default();
        let marker = FailureMarker {
            r#type: "failure",
            error: e.to_string(),
        };
        text.push_str(&serde_json::to_string(&marker).map_err(|se| Error::Data(se.to_string()))?);
        text.push('\n');
        fs::write(&report_jsonl, text)?;
        return Err(e);
    }

    report.validate()?;
    let summary_csv = cfg.output.dir.join("summary.csv");
    let outcomes_jsonl = cfg.output.dir.join("outcomes.jsonl");
    let config_copy = cfg.output.dir.join("config.toml");
    fs::write(&report_jsonl, report.to_jsonl()?)?;
    fs::write(&summary_csv, report.to_csv())?;
    let mut outcome_text = String::new();
    for rec in &bitmaps {
        outcome_text
            .push_str(&serde_json::to_string(rec).map_err(|e| Error::Data(e.to_string()))?);
        outcome_text.push('\n');
    }
    fs::write(&outcomes_jsonl, outcome_text)?;
    fs::write(&config_copy, cfg.to_toml()?)?;

    let table = report.render_table();
    Ok(ExperimentOutput {
        report,
        table,
        files: WrittenFiles {
            report_jsonl,
            summary_csv,
            outcomes_jsonl,
            config_copy,
        },
    })
}

fn run_rows(
    cfg: &ExperimentConfig,
    rows: &mut Vec<ReportRow>,
    bitmaps: &mut Vec<BitmapRecord>,
) -> Result<()> {
    let (train, test) = load_datasets(cfg)?;
    if train.is_empty() {
        return Err(Error::Data("training split is empty".into()));
    }
    let eval_set = test.take(cfg.attack.num_eval);
    if eval_set.is_empty() {
        return Err(Error::Data("evaluation split is empty".into()));
    }
    let kinds = cfg.attack_kinds()?;
    let master = RngStream::new(cfg.master_seed);
    let (_, _, channels) = train.image_shape();

    // Undefended baseline: identity transform.
    let identity = ShuffleKey::identity(cfg.ensemble.block_size, channels)?;
    let mut baseline_cfg = cfg.train_config();
    baseline_cfg.rng_seed = master.derive(b"baseline-train").seed();
    let baseline = train_submodel(&train, &identity, &baseline_cfg)?;

    // N encrypted sub-models.
    let mut ensemble_cfg = cfg.train_config();
    ensemble_cfg.rng_seed = master.derive(b"ensemble-train").seed();
    let ensemble = build_ensemble(
        &train,
        cfg.ensemble.num_members,
        cfg.ensemble.selection_size,
        &cfg.ensemble.key_seeds,
        cfg.ensemble.block_size,
        &ensemble_cfg,
    )?;

    let mut evaluate_row = |name: &str, pipeline: &dyn Pipeline| -> Result<ReportRow> {
        let clean_seed = master.derive(format!("clean-{name}").as_bytes()).seed();
        let clean = evaluate_clean(pipeline, &eval_set, clean_seed)?;
        let attack_cfg = AttackConfig {
            rng_seed: master.derive(format!("attacks-{name}").as_bytes()).seed(),
            ..cfg.attack_config()
        };
        let wc = worst_case_eval(pipeline, &eval_set, &kinds, &attack_cfg)?;
        for (kind, bits) in &wc.survived {
            bitmaps.push(BitmapRecord::new(name, kind.as_str(), bits));
        }
        Ok(ReportRow {
            model: name.to_string(),
            clean,
            per_attack: wc
                .per_attack
                .iter()
                .map(|(kind, robust)| AttackColumn {
                    attack: kind.as_str().to_string(),
                    robust: *robust,
                })
                .collect(),
            combined: wc.combined,
        })
    };

    let baseline_pipeline = SingleModelPipeline::new(&identity, &baseline)?;
    rows.push(evaluate_row("baseline", &baseline_pipeline)?);

    let simple = SimpleEnsemblePipeline::new(&ensemble);
    rows.push(evaluate_row("simple-ensemble", &simple)?);

    let random = RandomEnsemblePipeline::new(&ensemble, cfg.attack.white_box_mode);
    rows.push(evaluate_row("random-ensemble", &random)?);

    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::dataset::{gen_synthetic, SyntheticSpec};
    use crate::model::SubModel;
    use crate::rng::RngStream;

    /// Oracle that answers with the true label of the nearest memorized
    /// example (a perfect memorizer on its own split).
    struct Memorizer {
        data: Dataset,
    }

    impl Oracle for Memorizer {
        fn num_classes(&self) -> usize {
            self.data.num_classes()
        }

        fn probs(&self, x: &crate::image::ImageTensor, _rng: &mut RngStream) -> Result<Vec<f64>> {
            let mut best = (f64::INFINITY, 0usize);
            for (img, &label) in self.data.images().iter().zip(self.data.labels()) {
                let d = img.linf_distance(x)?;
                if d < best.0 {
                    best = (d, label);
                }
            }
            let mut probs = vec![0.0; self.data.num_classes()];
            probs[best.1] = 1.0;
            Ok(probs)
        }
    }

    /// Uniform-output oracle.
    struct Uniform {
        classes: usize,
    }

    impl Oracle for Uniform {
        fn num_classes(&self) -> usize {
            self.classes
        }

        fn probs(&self, _x: &crate::image::ImageTensor, _rng: &mut RngStream) -> Result<Vec<f64>> {
            Ok(vec![1.0 / self.classes as f64; self.classes])
        }
    }

    fn small_data(per_class: usize, seed: u64) -> Dataset {
        gen_synthetic(&SyntheticSpec {
            num_classes: 4,
            height: 4,
            width: 4,
            channels: 1,
            per_class,
            signal: 0.2,
            noise: 0.08,
            seed,
        })
        .unwrap()
    }

    #[test]
    fn memorizing_oracle_scores_perfectly_on_train() {
        let data = small_data(10, 3);
        let oracle = Memorizer { data: data.clone() };
        assert_eq!(evaluate_clean(&oracle, &data, 0).unwrap(), 100.0);
    }

    #[test]
    fn uniform_oracle_scores_chance_on_balanced_data() {
        // With uniform probabilities the argmax tie-break always answers
        // class 0, so balanced data scores exactly 100 / K.
        let data = small_data(50, 4);
        let oracle = Uniform { classes: 4 };
        let acc = evaluate_clean(&oracle, &data, 0).unwrap();
        assert!((acc - 25.0).abs() < 2.0, "accuracy {acc}");
    }

    #[test]
    fn deterministic_oracle_evaluates_identically_twice() {
        let data = small_data(10, 5);
        let key = ShuffleKey::generate(8, 2, 1).unwrap();
        let mut model = SubModel::init(&[16, 8, 4], 9).unwrap();
        model.bind_key(key.id());
        let p = SingleModelPipeline::new(&key, &model).unwrap();
        let a = evaluate_clean(&p, &data, 42).unwrap();
        let b = evaluate_clean(&p, &data, 42).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn failed_experiment_flushes_failure_marker() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = ExperimentConfig::smoke();
        cfg.output.dir = dir.path().to_path_buf();
        cfg.dataset = DatasetConfig::Cifar10 {
            train_path: dir.path().join("missing-train.bin"),
            test_path: dir.path().join("missing-test.bin"),
        };
        assert!(run_experiment(&cfg).is_err());
        let text = fs::read_to_string(dir.path().join("report.jsonl")).unwrap();
        assert!(text.lines().last().unwrap().contains("\"type\":\"failure\""));
    }

    #[test]
    fn combined_column_matches_bitmap_recomputation() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = ExperimentConfig::smoke();
        cfg.attack.num_eval = 20;
        cfg.output.dir = dir.path().to_path_buf();
        let out = run_experiment(&cfg).unwrap();

        let text = fs::read_to_string(&out.files.outcomes_jsonl).unwrap();
        let records: Vec<crate::harness::BitmapRecord> = text
            .lines()
            .map(|l| serde_json::from_str(l).unwrap())
            .collect();
        for row in &out.report.rows {
            let bitmaps: Vec<Vec<bool>> = records
                .iter()
                .filter(|r| r.model == row.model)
                .map(|r| r.bits())
                .collect();
            assert_eq!(bitmaps.len(), row.per_attack.len());
            let n = bitmaps[0].len();
            let survived_all = (0..n)
                .filter(|&i| bitmaps.iter().all(|b| b[i]))
                .count();
            let recomputed = 100.0 * survived_all as f64 / n as f64;
            assert_eq!(recomputed, row.combined, "row {}", row.model);
        }
    }
}
