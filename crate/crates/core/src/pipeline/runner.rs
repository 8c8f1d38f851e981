use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use candle_core::{DType, Device};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::config::{CorpusSource, ExperimentConfig, Method};
use super::ledger::{config_hash, EntryStatus, LedgerEntry, RunLedger, Stage};
use crate::classifier::{
    classification_metrics, predict, select_best, train_classifier_on, Checkpoint,
};
use crate::corpus::synthetic::read_metadata;
use crate::corpus::{
    generate_balanced_corpus, generate_toy_corpus, ingest_folder, load_image, merge_synthetic_up_to, DatasetManifest,
    ImageSet, Split, Termination,
};
use crate::diffusion::{apply_adapter, lora_finetune, make_schedule, train_diffusion, Denoiser, LoRAAdapter, LossPoint};
use crate::error::{Error, IoContext, Result};
use crate::eval::{aggregate_seeds, auroc, fpr_at_tpr, oracle_audit, EvalReport, MeanStd, OracleAudit, ReportRow, SeedMetrics};
use crate::guidance::generate_tail_set;
use crate::scores::{fit_gaussian_stats, score_zoo, MahalanobisModel, ScoreTable};

const MANIFEST: &str = "manifest.csv";
const CHECKPOINT: &str = "best.safetensors";
const DENOISER: &str = "denoiser.safetensors";
const ADAPTER: &str = "adapter.safetensors";
const METRICS: &str = "metrics.json";
const ZOO_FILE: &str = "zoo.json";
const SCORES: &str = "scores.csv";
const AUDIT: &str = "audit.json";

/// Where a completed stage keeps its artifacts.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StageOutput {
    pub stage: Stage,
    pub hash: String,
    pub dir: PathBuf,
    pub cached: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Allow {
    All,
    Only(Stage),
}

/// Runs stages of one experiment against its ledger.
pub struct Runner {
    pub config: ExperimentConfig,
    pub dir: PathBuf,
    pub ledger: RunLedger,
    /// Entries appended during this runner's lifetime.
    pub session: Vec<LedgerEntry>,
    allow: Allow,
    device: Device,
}

fn write_json(path: &Path, v: &impl Serialize) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(v)?).ctx(|| format!("writing {}", path.display()))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).ctx(|| format!("reading {}", path.display()))?;
    Ok(serde_json::from_str(&text)?)
}

fn curve_csv(curve: &[LossPoint]) -> String {
    let mut s = String::from("step,train_loss,heldout_loss\n");
    for p in curve {
        let _ = writeln!(
            s,
            "{},{},{}",
            p.step,
            p.train_loss,
            p.heldout_loss
        );
    }
    s
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).ctx(|| format!("writing {}", path.display()))
}

/// Score name to `{fpr, auc}` in percent.
pub type ZooMetrics = BTreeMap<String, BTreeMap<String, f64>>;

impl Runner {
    pub fn new(config: ExperimentConfig, root: Option<&Path>) -> Result<Self> {
        config.validate()?;
        let dir = super::config::experiment_dir(root, &config.name);
        let ledger = RunLedger::open(&dir)?;
        Ok(Self {
            config,
            dir,
            ledger,
            session: Vec::new(),
            allow: Allow::All,
            device: Device::Cpu,
        })
    }

    /// Restricts execution to `stage`; every upstream stage must already be
    /// in the ledger.
    pub fn only(mut self, stage: Stage) -> Self {
        self.allow = Allow::Only(stage);
        self
    }

    pub fn executed(&self) -> usize {
        self.session.iter().filter(|e| e.status == EntryStatus::Ran).count()
    }

    fn run(
        &mut self,
        stage: Stage,
        kind: &str,
        key: &str,
        own: Value,
        inputs: &[(&str, &StageOutput)],
        body: impl FnOnce(&Path) -> Result<Vec<PathBuf>>,
    ) -> Result<StageOutput> {
        let input_hashes: BTreeMap<String, String> =
            inputs.iter().map(|(role, o)| (role.to_string(), o.hash.clone())).collect();
        let hash = config_hash(&json!({"kind": kind, "config": own, "inputs": input_hashes}));
        if let Some(seen) = self.session.iter().find(|e| e.config_hash == hash && e.key == key && e.stage == stage) {
            return Ok(StageOutput {
                stage,
                hash,
                dir: self.dir.join(&seen.dir),
                cached: seen.status == EntryStatus::Cached,
            });
        }
        if let Some(prev) = self.ledger.find(&hash)? {
            let entry = LedgerEntry {
                stage,
                key: key.to_string(),
                status: EntryStatus::Cached,
                wall_time_s: 0.0,
                ..prev.clone()
            };
            self.ledger.append(&entry)?;
            self.session.push(entry);
            log::info!("{stage} [{key}] cached");
            return Ok(StageOutput {
                stage,
                hash,
                dir: self.dir.join(&prev.dir),
                cached: true,
            });
        }
        if let Allow::Only(target) = self.allow {
            if target != stage {
                return Err(Error::Dependency {
                    stage: target.to_string(),
                    upstream: stage.to_string(),
                });
            }
        }
        let rel = PathBuf::from(stage.as_str()).join(&hash[..16]);
        let dir = self.dir.join(&rel);
        if dir.exists() {
            fs::remove_dir_all(&dir).ctx(|| format!("clearing {}", dir.display()))?;
        }
        fs::create_dir_all(&dir).ctx(|| format!("creating {}", dir.display()))?;
        log::info!("{stage} [{key}] running in {}", dir.display());
        let start = Instant::now();
        let files = body(&dir)?;
        let wall_time_s = start.elapsed().as_secs_f64();
        let outputs = files.iter().map(|f| self.ledger.artifact(f)).collect::<Result<_>>()?;
        let entry = LedgerEntry {
            stage,
            key: key.to_string(),
            config_hash: hash.clone(),
            dir: rel,
            inputs: input_hashes,
            outputs,
            wall_time_s,
            status: EntryStatus::Ran,
        };
        self.ledger.append(&entry)?;
        self.session.push(entry);
        Ok(StageOutput {
            stage,
            hash,
            dir,
            cached: false,
        })
    }

    pub fn corpus(&mut self) -> Result<StageOutput> {
        let source = self.config.corpus.clone();
        self.run(Stage::Corpus, "corpus", "corpus", json!(source), &[], |dir| {
            match &source {
                CorpusSource::Toy(spec) => {
                    generate_toy_corpus(spec, dir)?;
                }
                CorpusSource::Folder(spec) => {
                    ingest_folder(spec)?.write(&dir.join(MANIFEST))?;
                }
            }
            Ok(vec![dir.join(MANIFEST)])
        })
    }

    pub fn manifest(out: &StageOutput) -> Result<DatasetManifest> {
        DatasetManifest::read(&out.dir.join(MANIFEST))
    }

    /// Trains a classifier. Auxiliary classifiers and the plain CE baseline
    /// share a configuration and therefore an artifact.
    pub fn classifier(
        &mut self,
        stage: Stage,
        method: Method,
        seed: u64,
        synthetic: Option<(&StageOutput, usize)>,
    ) -> Result<StageOutput> {
        let corpus = self.corpus()?;
        let manifest = Self::manifest(&corpus)?;
        let cfg = self.config.classifier_for(method, seed, manifest.taxonomy.n_classes());
        let syn_own = synthetic.map(|(_, n)| json!({"per_class": n, "inclusion": method.inclusion()}));
        let own = json!({"classifier": cfg, "synthetic": syn_own});
        let mut inputs = vec![("corpus", &corpus)];
        if let Some((g, _)) = synthetic {
            inputs.push(("generate", g));
        }
        let syn = synthetic.map(|(g, n)| (g.dir.clone(), n));
        let device = self.device.clone();
        let key = format!("{method}/seed={seed}");
        self.run(stage, "classifier", &key, own, &inputs, |dir| {
            let mut train_set = manifest.clone();
            let mut files = Vec::new();
            if let Some((gdir, n)) = &syn {
                train_set = merge_synthetic_up_to(&manifest, gdir, *n, method.inclusion())?;
                train_set.write(&dir.join("train_manifest.csv"))?;
                files.push(dir.join("train_manifest.csv"));
            }
            let outcome = train_classifier_on(&cfg, &train_set, &device)?;
            let best = select_best(&outcome.checkpoints)?;
            best.save(&dir.join(CHECKPOINT))?;
            outcome.write_log(&dir.join("log.csv"))?;
            files.push(dir.join(CHECKPOINT));
            files.push(dir.join("log.csv"));
            Ok(files)
        })
    }

    pub fn diffusion(&mut self) -> Result<StageOutput> {
        let corpus = self.corpus()?;
        let cfg = self.config.diffusion.clone();
        self.run(Stage::Diffusion, "diffusion", "diffusion", json!(cfg), &[("corpus", &corpus)], |dir| {
            let manifest = Self::manifest(&corpus)?;
            let schedule = make_schedule(cfg.t_max, cfg.schedule)?;
            let out = train_diffusion(&manifest, &cfg.unet, &schedule, &cfg.train)?;
            out.denoiser.save(&dir.join(DENOISER))?;
            write_text(&dir.join("curve.csv"), &curve_csv(&out.curve))?;
            Ok(vec![dir.join(DENOISER), dir.join("curve.csv")])
        })
    }

    pub fn lora(&mut self) -> Result<StageOutput> {
        let corpus = self.corpus()?;
        let base = self.diffusion()?;
        let cfg = self.config.lora.clone();
        let device = self.device.clone();
        let inputs = [("corpus", &corpus), ("diffusion", &base)];
        self.run(Stage::Lora, "lora", "lora", json!(cfg), &inputs, |dir| {
            let manifest = Self::manifest(&corpus)?;
            let tax = manifest.taxonomy.clone();
            let tail = manifest.filtered(|r| tax.is_tail(r.class_id) && r.split != Split::Test);
            let denoiser = Denoiser::load(&base.dir.join(DENOISER), &device)?;
            let out = lora_finetune(&denoiser, &tail, &cfg)?;
            out.adapter.save(&dir.join(ADAPTER))?;
            write_text(&dir.join("curve.csv"), &curve_csv(&out.curve))?;
            Ok(vec![dir.join(ADAPTER), dir.join("curve.csv")])
        })
    }

    /// Guided generation for a synthetic-data method.
    pub fn generate(&mut self, method: Method, seed: u64) -> Result<StageOutput> {
        let mut guidance = method
            .guidance(&self.config.guidance)
            .ok_or_else(|| Error::invalid("generate", format!("method {method} uses no synthetic data")))?;
        let gen_seed = self.config.generation_seed(seed);
        guidance.seed = self.config.guidance.seed.wrapping_add(gen_seed);
        let aux = self.classifier(Stage::AuxClassifier, Method::Ce, gen_seed, None)?;
        let base = self.diffusion()?;
        let adapter = self.lora()?;
        let corpus = self.corpus()?;
        let per_class = self.config.generated_per_class();
        let own = json!({"guidance": guidance, "per_class": per_class});
        let device = self.device.clone();
        let inputs = [("aux_classifier", &aux), ("diffusion", &base), ("lora", &adapter), ("corpus", &corpus)];
        let key = format!("{method}/seed={gen_seed}");
        self.run(Stage::Generate, "generate", &key, own, &inputs, |dir| {
            let taxonomy = Self::manifest(&corpus)?.taxonomy;
            let denoiser = Denoiser::load(&base.dir.join(DENOISER), &device)?;
            let lora = LoRAAdapter::load(&adapter.dir.join(ADAPTER), &device)?;
            let adapted = apply_adapter(&denoiser, &lora, 1.0)?;
            let clf = Checkpoint::load(&aux.dir.join(CHECKPOINT), &device)?.network(false)?;
            let set = generate_tail_set(&adapted, &clf, &taxonomy, per_class, &guidance, dir)?;
            let mut files = vec![dir.join(crate::corpus::synthetic::METADATA_FILE)];
            files.extend(set.records.iter().map(|r| dir.join(&r.path)));
            if !set.failures.is_empty() {
                write_json(&dir.join("failures.json"), &set.failures.iter().map(|f| {
                    json!({"class_id": f.class_id, "seed": f.seed, "reason": f.reason})
                }).collect::<Vec<_>>())?;
                files.push(dir.join("failures.json"));
            }
            Ok(files)
        })
    }

    /// Test-split metrics in percent, plus the score comparison when `zoo` is set.
    pub fn evaluate(&mut self, method: Method, seed: u64, classifier: &StageOutput, zoo: bool) -> Result<StageOutput> {
        let corpus = self.corpus()?;
        let tpr = self.config.classifier.tpr_target;
        let own = json!({"tpr_target": tpr, "zoo": zoo, "temperature": 1.0});
        let device = self.device.clone();
        let inputs = [("corpus", &corpus), ("classifier", classifier)];
        let key = format!("{method}/seed={seed}");
        self.run(Stage::Evaluate, "evaluate", &key, own, &inputs, |dir| {
            let manifest = Self::manifest(&corpus)?;
            let tax = &manifest.taxonomy;
            let ckpt = Checkpoint::load(&classifier.dir.join(CHECKPOINT), &device)?;
            let net = ckpt.network(false)?;
            let size = ckpt.config.image_size;
            let test_records = manifest.split_records(Split::Test);
            let test = ImageSet::load(&manifest, &test_records, size)?;
            let pred = predict(&net, &test, DType::F32, &device)?;
            let m = classification_metrics(&pred.logits, &test.labels, tax, tpr)?;
            let metrics: BTreeMap<String, f64> = [
                ("fpr", m.fpr_tail),
                ("auc", m.auc_tail),
                ("bacc_head", m.bacc_head),
                ("bacc_tail", m.bacc_tail),
            ]
            .into_iter()
            .map(|(k, v)| (k.to_string(), v))
            .collect();
            write_json(&dir.join(METRICS), &metrics)?;
            let is_tail: Vec<bool> = test.labels.iter().map(|&l| tax.is_tail(l)).collect();
            let mut table = ScoreTable::new(test.ids.clone(), is_tail.clone())?;
            let mut files = vec![dir.join(METRICS)];
            if zoo {
                let train_records = manifest.split_records(Split::Train);
                let train = ImageSet::load(&manifest, &train_records, size)?;
                let tf = predict(&net, &train, DType::F32, &device)?;
                let maha = MahalanobisModel {
                    head: Some(fit_gaussian_stats(&tf.features, &train.labels, &tax.head(), None)?),
                    tail: Some(fit_gaussian_stats(&tf.features, &train.labels, &tax.tail(), None)?),
                };
                score_zoo(&mut table, &pred.logits, &pred.features, tax, &maha, 1.0)?;
                let mut zm = ZooMetrics::new();
                for name in table.names().to_vec() {
                    let col = table.column(&name)?;
                    zm.insert(
                        name,
                        BTreeMap::from([
                            ("fpr".to_string(), 100.0 * fpr_at_tpr(col, &is_tail, tpr)?),
                            ("auc".to_string(), 100.0 * auroc(col, &is_tail)?),
                        ]),
                    );
                }
                write_json(&dir.join(ZOO_FILE), &zm)?;
                files.push(dir.join(ZOO_FILE));
            } else {
                table.add("p_tail", crate::classifier::p_tail_of(&pred.logits, tax))?;
            }
            table.write(&dir.join(SCORES))?;
            files.push(dir.join(SCORES));
            Ok(files)
        })
    }

    /// Oracle classifier trained on a balanced rendering of the toy corpus.
    pub fn oracle(&mut self) -> Result<StageOutput> {
        let oc = self
            .config
            .oracle
            .clone()
            .ok_or_else(|| Error::invalid("oracle", "experiment has no oracle section"))?;
        let CorpusSource::Toy(spec) = self.config.corpus.clone() else {
            return Err(Error::invalid("oracle", "needs the procedural corpus"));
        };
        let device = self.device.clone();
        let own = json!({"oracle": oc, "corpus": spec});
        self.run(Stage::Oracle, "oracle", "oracle", own, &[], |dir| {
            let manifest = generate_balanced_corpus(&spec, oc.per_class, &dir.join("corpus"))?;
            let mut cfg = oc.classifier.clone();
            cfg.n_classes = spec.n_classes;
            let outcome = train_classifier_on(&cfg, &manifest, &device)?;
            let best = select_best(&outcome.checkpoints)?;
            best.save(&dir.join(CHECKPOINT))?;
            // Sanity anchor: accuracy on natural tail test images.
            let tax = &manifest.taxonomy;
            let recs: Vec<_> = manifest.split(Split::Test).filter(|r| tax.is_tail(r.class_id)).cloned().collect();
            let test = ImageSet::load(&manifest, &recs, spec.image_size)?;
            let pred = predict(&best.network(false)?, &test, DType::F32, &device)?.argmax();
            let audit = oracle_audit(&pred, &test.labels, spec.n_classes)?;
            write_json(&dir.join(AUDIT), &audit)?;
            Ok(vec![dir.join(CHECKPOINT), dir.join(AUDIT)])
        })
    }

    /// Intended-class rate of a generated set under the oracle.
    pub fn audit(&mut self, method: Method, generated: &StageOutput) -> Result<StageOutput> {
        let oracle = self.oracle()?;
        let device = self.device.clone();
        let n_classes = Self::manifest(&self.corpus()?)?.taxonomy.n_classes();
        let inputs = [("oracle", &oracle), ("generate", generated)];
        self.run(Stage::Audit, "audit", method.as_str(), json!({}), &inputs, |dir| {
            let ckpt = Checkpoint::load(&oracle.dir.join(CHECKPOINT), &device)?;
            let net = ckpt.network(false)?;
            let rows = read_metadata(&generated.dir)?;
            let size = ckpt.config.image_size;
            let mut data = Vec::new();
            for r in &rows {
                data.extend(load_image(&generated.dir.join(&r.path), size)?);
            }
            let set = ImageSet {
                size,
                data,
                labels: rows.iter().map(|r| r.class_id).collect(),
                ids: rows.iter().map(|r| r.seed.to_string()).collect(),
            };
            let pred = predict(&net, &set, DType::F32, &device)?.argmax();
            let audit = oracle_audit(&pred, &set.labels, n_classes)?;
            write_json(&dir.join(AUDIT), &audit)?;
            Ok(vec![dir.join(AUDIT)])
        })
    }

    /// All stages of one (method, seed) cell, returning test metrics.
    pub fn cell(&mut self, method: Method, seed: u64, per_class: usize) -> Result<(SeedMetrics, Option<ZooMetrics>)> {
        if !method.is_implemented() {
            return Err(Error::invalid("method", format!("{method} is not implemented")));
        }
        let generated = if method.uses_synthetic() {
            Some(self.generate(method, seed)?)
        } else {
            None
        };
        let clf = self.classifier(Stage::Retrain, method, seed, generated.as_ref().map(|g| (g, per_class)))?;
        let zoo = method == Method::Ce;
        let ev = self.evaluate(method, seed, &clf, zoo)?;
        let metrics: BTreeMap<String, f64> = read_json(&ev.dir.join(METRICS))?;
        let zm = if zoo { Some(read_json(&ev.dir.join(ZOO_FILE))?) } else { None };
        Ok((
            SeedMetrics {
                method: method.to_string(),
                seed,
                metrics,
            },
            zm,
        ))
    }

    /// Runs `stage` for one cell, requiring every upstream stage to be cached.
    pub fn run_stage(config: ExperimentConfig, root: Option<&Path>, stage: Stage, method: Method, seed: u64) -> Result<LedgerEntry> {
        Runner::new(config, root)?.only(stage).stage(stage, method, seed)
    }

    /// Runs (or finds cached) `stage` for one cell and returns its ledger entry.
    pub fn stage(&mut self, stage: Stage, method: Method, seed: u64) -> Result<LedgerEntry> {
        let per_class = self.config.synthetic_per_class;
        let out = match stage {
            Stage::Corpus => self.corpus()?,
            Stage::AuxClassifier => {
                let s = self.config.generation_seed(seed);
                self.classifier(Stage::AuxClassifier, Method::Ce, s, None)?
            }
            Stage::Diffusion => self.diffusion()?,
            Stage::Lora => self.lora()?,
            Stage::Generate => self.generate(method, seed)?,
            Stage::Retrain | Stage::Evaluate => {
                let g = if method.uses_synthetic() { Some(self.generate(method, seed)?) } else { None };
                let c = self.classifier(Stage::Retrain, method, seed, g.as_ref().map(|g| (g, per_class)))?;
                if stage == Stage::Evaluate {
                    self.evaluate(method, seed, &c, method == Method::Ce)?
                } else {
                    c
                }
            }
            Stage::Oracle => self.oracle()?,
            Stage::Audit => {
                let g = self.generate(method, seed)?;
                self.audit(method, &g)?
            }
        };
        Ok(self
            .session
            .iter()
            .rev()
            .find(|e| e.config_hash == out.hash)
            .cloned()
            .expect("every stage call records an entry"))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellFailure {
    pub method: String,
    pub seed: u64,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationSummary {
    pub method: String,
    pub seed: u64,
    pub n_images: usize,
    pub threshold_met: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub per_class: usize,
    pub fpr: MeanStd,
    pub auc: MeanStd,
}

#[derive(Debug, Clone)]
pub struct SuiteOutcome {
    pub report: EvalReport,
    /// Every score on the plain CE model.
    pub zoo: Option<EvalReport>,
    pub sweep: Vec<SweepPoint>,
    pub generation: Vec<GenerationSummary>,
    pub audits: BTreeMap<String, OracleAudit>,
    pub failures: Vec<CellFailure>,
    pub executed: usize,
    pub cached: usize,
    pub dir: PathBuf,
}

fn summarize_generation(method: Method, seed: u64, g: &StageOutput) -> Result<GenerationSummary> {
    let rows = read_metadata(&g.dir)?;
    Ok(GenerationSummary {
        method: method.to_string(),
        seed,
        n_images: rows.len(),
        threshold_met: rows.iter().filter(|r| r.termination == Termination::ThresholdMet).count(),
    })
}

/// Every (method, seed) cell, aggregated into reports written under
/// `<experiment>/report`. Failed cells are logged and left out.
pub fn run_method_suite(config: ExperimentConfig, root: Option<&Path>) -> Result<SuiteOutcome> {
    let mut r = Runner::new(config, root)?;
    let cfg = r.config.clone();
    let mut rows = Vec::new();
    let mut zoo_rows = Vec::new();
    let mut failures = Vec::new();
    let mut generation = Vec::new();
    let mut audits = BTreeMap::new();
    let mut gen_seen = BTreeMap::new();
    for &method in &cfg.methods {
        if !method.is_implemented() {
            continue;
        }
        for &seed in &cfg.seeds {
            match r.cell(method, seed, cfg.synthetic_per_class) {
                Ok((m, z)) => {
                    rows.push(m);
                    if let Some(z) = z {
                        for (name, vals) in z {
                            zoo_rows.push(SeedMetrics {
                                method: name,
                                seed,
                                metrics: vals,
                            });
                        }
                    }
                }
                Err(e) => {
                    log::error!("{method} seed {seed} failed: {e}");
                    failures.push(CellFailure {
                        method: method.to_string(),
                        seed,
                        reason: e.to_string(),
                    });
                    continue;
                }
            }
            if method.uses_synthetic() {
                let g = r.generate(method, seed)?;
                if gen_seen.insert(g.hash.clone(), ()).is_none() {
                    generation.push(summarize_generation(method, r.config.generation_seed(seed), &g)?);
                    if cfg.oracle.is_some() && !audits.contains_key(method.as_str()) {
                        match r.audit(method, &g) {
                            Ok(a) => {
                                audits.insert(method.to_string(), read_json(&a.dir.join(AUDIT))?);
                            }
                            Err(e) => log::error!("audit of {method} failed: {e}"),
                        }
                    }
                }
            }
        }
    }
    let mut report_rows = aggregate_seeds(&rows)?;
    for &method in &cfg.methods {
        if !report_rows.iter().any(|row| row.method == method.as_str()) {
            report_rows.push(ReportRow {
                method: method.to_string(),
                n_seeds: 0,
                metrics: BTreeMap::new(),
                note: Some(if method.is_implemented() { "failed" } else { "not implemented" }.into()),
            });
        }
    }
    report_rows.sort_by(|a, b| a.method.cmp(&b.method));
    let report = EvalReport {
        score_name: "p_tail".into(),
        seeds: cfg.seeds.clone(),
        rows: report_rows,
    };
    let zoo = (!zoo_rows.is_empty())
        .then(|| -> Result<EvalReport> {
            Ok(EvalReport {
                score_name: "score comparison (ce)".into(),
                seeds: cfg.seeds.clone(),
                rows: aggregate_seeds(&zoo_rows)?,
            })
        })
        .transpose()?;
    let mut sweep = Vec::new();
    for &n in &cfg.sweep_per_class {
        let mut fpr = Vec::new();
        let mut auc = Vec::new();
        for &seed in &cfg.seeds {
            match r.cell(Method::Logex, seed, n) {
                Ok((m, _)) => {
                    fpr.push(m.metrics["fpr"]);
                    auc.push(m.metrics["auc"]);
                }
                Err(e) => failures.push(CellFailure {
                    method: format!("logex@{n}"),
                    seed,
                    reason: e.to_string(),
                }),
            }
        }
        if !fpr.is_empty() {
            sweep.push(SweepPoint {
                per_class: n,
                fpr: MeanStd::of(&fpr)?,
                auc: MeanStd::of(&auc)?,
            });
        }
    }
    let out_dir = r.dir.join("report");
    emit_report(&report, &[ReportFormat::Csv, ReportFormat::Markdown], &out_dir)?;
    if let Some(z) = &zoo {
        emit_report(z, &[ReportFormat::Csv, ReportFormat::Markdown], &out_dir.join("scores"))?;
    }
    write_text(&out_dir.join("sweep.csv"), &sweep_csv(&sweep))?;
    write_json(&out_dir.join("generation.json"), &generation)?;
    write_json(&out_dir.join("audit.json"), &audits)?;
    write_json(&out_dir.join("failures.json"), &failures)?;
    let executed = r.executed();
    Ok(SuiteOutcome {
        report,
        zoo,
        sweep,
        generation,
        audits,
        failures,
        executed,
        cached: r.session.len() - executed,
        dir: r.dir,
    })
}

pub fn sweep_csv(points: &[SweepPoint]) -> String {
    let mut s = String::from("per_class,fpr_mean,fpr_std,auc_mean,auc_std\n");
    let f = |v: Option<f64>| v.map_or(String::new(), |x| x.to_string());
    for p in points {
        let _ = writeln!(
            s,
            "{},{},{},{},{}",
            p.per_class,
            p.fpr.mean,
            f(p.fpr.std),
            p.auc.mean,
            f(p.auc.std)
        );
    }
    s
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReportFormat {
    Csv,
    Markdown,
}

/// Writes `report.csv` and/or `report.md` into `dir`.
pub fn emit_report(report: &EvalReport, formats: &[ReportFormat], dir: &Path) -> Result<Vec<PathBuf>> {
    if report.rows.is_empty() {
        return Err(Error::invalid("report", "no rows"));
    }
    fs::create_dir_all(dir).ctx(|| format!("creating {}", dir.display()))?;
    let mut out = Vec::new();
    for f in formats {
        let (name, text) = match f {
            ReportFormat::Csv => ("report.csv", report.to_csv()),
            ReportFormat::Markdown => ("report.md", report.to_markdown()),
        };
        write_text(&dir.join(name), &text)?;
        out.push(dir.join(name));
    }
    Ok(out)
}

/// Own configuration of every stage a method touches, without upstream
/// hashes. Two methods' plans differ exactly where their stage configs do.
pub fn stage_plan(config: &ExperimentConfig, method: Method, seed: u64, n_classes: usize) -> Value {
    let gen_seed = config.generation_seed(seed);
    let mut plan = serde_json::Map::new();
    plan.insert("corpus".into(), json!(config.corpus));
    let syn = method.uses_synthetic();
    if let Some(mut g) = method.guidance(&config.guidance) {
        g.seed = config.guidance.seed.wrapping_add(gen_seed);
        plan.insert("aux_classifier".into(), json!(config.classifier_for(Method::Ce, gen_seed, n_classes)));
        plan.insert("diffusion".into(), json!(config.diffusion));
        plan.insert("lora".into(), json!(config.lora));
        plan.insert(
            "generate".into(),
            json!({"guidance": g, "per_class": config.generated_per_class()}),
        );
    }
    let syn_own = syn.then(|| json!({"per_class": config.synthetic_per_class, "inclusion": method.inclusion()}));
    plan.insert(
        "retrain".into(),
        json!({"classifier": config.classifier_for(method, seed, n_classes), "synthetic": syn_own}),
    );
    Value::Object(plan)
}
