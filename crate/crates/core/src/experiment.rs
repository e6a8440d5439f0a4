//! End-to-end recipe: corpus, cluster targets, upstream pretraining, then
//! per fold and training-set size: train, average, evaluate; finally the
//! curves CSV. Each stage is callable on its own and reads what earlier
//! stages left under the output directory.
//!
//! Output layout:
//!
//! ```text
//! <out>/config.toml
//! <out>/corpus/{manifest.jsonl, wav/}        synthetic corpus only
//! <out>/codebook.ckpt
//! <out>/upstream.ckpt
//! <out>/runs/<n>/fold<i>/step<N>.ckpt       <n> is n<count> or full
//! <out>/runs/<n>/fold<i>/averaged.ckpt
//! <out>/runs/<n>/fold<i>/report.json
//! <out>/curves.csv
//! ```
//!
//! Every `.ckpt` and the CSV have a `.meta.json` sidecar.

use std::collections::HashMap;
use std::path::{Component, Path, PathBuf};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::audio::{read_wav, Waveform};
use crate::config::{Averaging, ExperimentConfig};
use crate::container::{load_checkpoint, load_codebook, load_upstream, save_checkpoint, save_codebook, save_upstream};
use crate::downstream::ClassifierHead;
use crate::error::{Error, Result, StageExt};
use crate::eval::{dev_split, duration_sliced_eval, group_kfold, subsample_per_class, EvalReport, FoldPlan};
use crate::features::{kmeans_assign, kmeans_fit, logmel, mfcc_from_logmel, Codebook, FeatureSequence};
use crate::manifest::{Manifest, UtteranceRecord};
use crate::nn::Tensor;
use crate::report::emit_report;
use crate::seed;
use crate::synth::generate_corpus;
use crate::training::{
    average_checkpoints, select_best_plus_step, select_top_k, train, train_fingerprint, Checkpoint,
    CheckpointStore, Example,
};
use crate::upstream::{pretrain, PretrainLog, UpstreamModel};

/// Output directory guard: every write goes through a relative path that
/// may not escape the root.
#[derive(Debug, Clone)]
pub struct OutDir {
    root: PathBuf,
}

impl OutDir {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    /// Resolves `rel` under the root. Absolute paths and `..` are refused.
    pub fn path(&self, rel: impl AsRef<Path>) -> Result<PathBuf> {
        let rel = rel.as_ref();
        if rel.components().any(|c| !matches!(c, Component::Normal(_) | Component::CurDir)) {
            return Err(Error::OutsideOutputDir(rel.to_path_buf()));
        }
        Ok(self.root.join(rel))
    }

    pub fn create_dir(&self, rel: impl AsRef<Path>) -> Result<PathBuf> {
        let p = self.path(rel)?;
        std::fs::create_dir_all(&p).map_err(|e| Error::io(&p, e))?;
        Ok(p)
    }

    pub fn write(&self, rel: impl AsRef<Path>, bytes: &[u8]) -> Result<PathBuf> {
        let p = self.path(rel)?;
        if let Some(dir) = p.parent() {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        std::fs::write(&p, bytes).map_err(|e| Error::io(&p, e))?;
        Ok(p)
    }
}

/// A loaded corpus: records, audio and log-mel features, index-aligned.
#[derive(Debug, Clone)]
pub struct Data {
    pub manifest: Manifest,
    pub audio: Vec<Waveform>,
    pub logmel: Vec<FeatureSequence>,
    index: HashMap<String, usize>,
}

impl Data {
    pub fn from_parts(manifest: Manifest, audio: Vec<Waveform>, n_mels: usize) -> Result<Self> {
        if manifest.len() != audio.len() {
            return Err(Error::LengthMismatch(manifest.len(), audio.len()));
        }
        let logmel = audio.iter().map(|w| logmel(w, n_mels)).collect::<Result<Vec<_>>>()?;
        let index = manifest.iter().enumerate().map(|(i, r)| (r.utt_id.clone(), i)).collect();
        Ok(Self {
            manifest,
            audio,
            logmel,
            index,
        })
    }

    pub fn index_of(&self, r: &UtteranceRecord) -> Result<usize> {
        self.index
            .get(&r.utt_id)
            .copied()
            .ok_or_else(|| Error::Manifest(format!("unknown utterance {}", r.utt_id)))
    }

    pub fn examples(&self, m: &Manifest) -> Result<Vec<Example>> {
        m.iter()
            .map(|r| {
                Ok(Example {
                    features: self.logmel[self.index_of(r)?].clone(),
                    label: r.label.clone(),
                })
            })
            .collect()
    }

    pub fn test_set(&self, m: &Manifest) -> Result<Vec<(Waveform, String)>> {
        m.iter()
            .map(|r| Ok((self.audio[self.index_of(r)?].clone(), r.label.clone())))
            .collect()
    }
}

/// Directory name of a sweep point.
pub fn point_dir(n_per_class: Option<usize>, fold: usize) -> PathBuf {
    let n = n_per_class.map_or_else(|| "full".to_string(), |n| format!("n{n}"));
    Path::new("runs").join(n).join(format!("fold{fold}"))
}

#[derive(Debug, Clone)]
pub struct Experiment {
    pub cfg: ExperimentConfig,
    pub out: OutDir,
    pub fingerprint: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct CorpusStamp {
    synth_fingerprint: String,
}

impl Experiment {
    pub fn new(cfg: ExperimentConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            out: OutDir::new(&cfg.output_dir),
            fingerprint: cfg.fingerprint(),
            cfg,
        })
    }

    /// Creates the output directory and records the resolved config.
    pub fn init(&self) -> Result<()> {
        self.out.create_dir("")?;
        self.out.write("config.toml", self.cfg.to_toml().as_bytes())?;
        Ok(())
    }

    fn stage_seed(&self, stage: &str) -> u64 {
        self.cfg.stage_seed(stage, 0)
    }

    /// Generates the synthetic corpus under `corpus/`.
    pub fn synth(&self) -> Result<Manifest> {
        (|| {
            let spec = self.cfg.synth.clone().ok_or_else(|| Error::Range {
                field: "synth".into(),
                message: "no [synth] section".into(),
            })?;
            let mut spec = spec;
            spec.seed = self.cfg.stage_seed("synth", spec.seed);
            let dir = self.out.create_dir("corpus")?;
            let m = generate_corpus(&spec, &dir)?;
            let stamp = CorpusStamp {
                synth_fingerprint: seed::fingerprint(serde_json::to_string(&spec)?.as_bytes()),
            };
            self.out.write("corpus/synth.json", serde_json::to_string(&stamp)?.as_bytes())?;
            Ok(m)
        })()
        .stage("synth")
    }

    /// The labelled corpus: the synthetic one (generated if missing or
    /// stale) or the manifest named in the config.
    pub fn corpus(&self) -> Result<Manifest> {
        if let Some(spec) = &self.cfg.synth {
            let mut spec = spec.clone();
            spec.seed = self.cfg.stage_seed("synth", spec.seed);
            let want = seed::fingerprint(serde_json::to_string(&spec)?.as_bytes());
            let stamp = std::fs::read_to_string(self.out.path("corpus/synth.json")?)
                .ok()
                .and_then(|t| serde_json::from_str::<CorpusStamp>(&t).ok());
            if stamp.is_some_and(|s| s.synth_fingerprint == want) {
                return Manifest::load(&self.out.path("corpus/manifest.jsonl")?).stage("synth");
            }
            return self.synth();
        }
        match &self.cfg.task.manifest {
            Some(p) => Manifest::load(p).stage("corpus"),
            None => Err(Error::Manifest("neither [synth] nor task.manifest is configured".into())).stage("corpus"),
        }
    }

    pub fn load_data(&self, m: Manifest) -> Result<Data> {
        (|| {
            let audio = m.iter().map(|r| read_wav(m.resolve(r))).collect::<Result<Vec<_>>>()?;
            Data::from_parts(m, audio, self.cfg.model.n_mels)
        })()
        .stage("features")
    }

    /// Fits the MFCC codebook on (a seeded subsample of) every frame and
    /// writes `codebook.ckpt`.
    pub fn kmeans(&self, data: &Data) -> Result<Codebook> {
        (|| {
            let fp = &self.cfg.features;
            let mfcc = data
                .logmel
                .iter()
                .map(|m| mfcc_from_logmel(m, fp.n_mfcc))
                .collect::<Result<Vec<_>>>()?;
            let mut rows: Vec<(usize, usize)> = mfcc
                .iter()
                .enumerate()
                .flat_map(|(i, m)| (0..m.frames()).map(move |t| (i, t)))
                .collect();
            if rows.len() > fp.kmeans_max_frames {
                rows.shuffle(&mut seed::stream_rng(self.cfg.seed, "kmeans/subsample"));
                rows.truncate(fp.kmeans_max_frames);
                rows.sort_unstable();
            }
            let mut flat = Vec::with_capacity(rows.len() * fp.n_mfcc);
            for &(i, t) in &rows {
                flat.extend_from_slice(mfcc[i].frame(t));
            }
            let x = Tensor::matrix(rows.len(), fp.n_mfcc, flat)?;
            let mut cb = kmeans_fit(&x, self.cfg.model.codebook_size, self.stage_seed("kmeans"), fp.kmeans_max_iters)?;
            cb.feature_kind = format!("mfcc{}", fp.n_mfcc);
            save_codebook(&self.out.path("codebook.ckpt")?, &cb, &self.fingerprint)?;
            Ok(cb)
        })()
        .stage("kmeans")
    }

    /// Cluster targets of every utterance.
    pub fn targets(&self, data: &Data, cb: &Codebook) -> Result<Vec<Vec<usize>>> {
        data.logmel
            .iter()
            .map(|m| kmeans_assign(&mfcc_from_logmel(m, self.cfg.features.n_mfcc)?, cb))
            .collect()
    }

    /// Pretrains on every utterance of the corpus (labels unused) and writes
    /// `upstream.ckpt`.
    pub fn pretrain(&self, data: &Data, cb: &Codebook) -> Result<(UpstreamModel, PretrainLog)> {
        (|| {
            let targets = self.targets(data, cb)?;
            let mut model = UpstreamModel::new(self.cfg.model.clone(), self.stage_seed("upstream/init"))?;
            model.fit_normalization(data.logmel.iter())?;
            let mask = self.cfg.mask.with_seed(self.cfg.stage_seed("mask", self.cfg.mask.seed));
            let log = pretrain(
                &mut model,
                &data.logmel,
                &targets,
                &mask,
                &self.cfg.pretrain,
                self.stage_seed("pretrain"),
            )?;
            if let Some(l) = log.losses.iter().find(|l| !l.is_finite()) {
                return Err(Error::NonFinite(format!("pretraining loss {l}")));
            }
            save_upstream(&self.out.path("upstream.ckpt")?, &model, &self.fingerprint)?;
            Ok((model, log))
        })()
        .stage("pretrain")
    }

    /// The configured upstream checkpoint, else this run's `upstream.ckpt`,
    /// else k-means plus pretraining.
    pub fn upstream(&self, data: &Data) -> Result<UpstreamModel> {
        if let Some(p) = &self.cfg.upstream_checkpoint {
            let (m, _) = load_upstream(p, None).stage("pretrain")?;
            if m.config() != &self.cfg.model {
                return Err(Error::IncompatibleCheckpoints(format!(
                    "{} was built with different model dimensions",
                    p.display()
                )))
                .stage("pretrain");
            }
            return Ok(m);
        }
        let own = self.out.path("upstream.ckpt")?;
        if own.is_file() {
            return Ok(load_upstream(&own, Some(&self.fingerprint)).stage("pretrain")?.0);
        }
        let cb_path = self.out.path("codebook.ckpt")?;
        let cb = if cb_path.is_file() {
            load_codebook(&cb_path, Some(&self.fingerprint)).stage("kmeans")?
        } else {
            self.kmeans(data)?
        };
        Ok(self.pretrain(data, &cb)?.0)
    }

    pub fn folds(&self, m: &Manifest) -> Result<FoldPlan> {
        group_kfold(m, self.cfg.protocol.folds, self.cfg.protocol.group_key, self.stage_seed("folds")).stage("folds")
    }

    fn point_seed(&self, what: &str, n: Option<usize>, fold: usize, local: u64) -> u64 {
        self.cfg.stage_seed(&format!("{what}/{n:?}/{fold}"), local)
    }

    fn head(&self, data: &Data, n: Option<usize>, fold: usize) -> Result<ClassifierHead> {
        ClassifierHead::new(
            &self.cfg.task.name,
            data.manifest.labels(),
            self.cfg.model.d_model,
            self.point_seed("head", n, fold, 0),
        )
    }

    /// Training and dev manifests of one sweep point.
    pub fn point_split(&self, data: &Data, plan: &FoldPlan, fold: usize, n: Option<usize>) -> Result<(Manifest, Manifest)> {
        let (train_m, _) = plan.split(&data.manifest, fold)?;
        let pool = match n {
            Some(n) => subsample_per_class(&train_m, n, self.point_seed("subsample", Some(n), fold, 0))?,
            None => train_m,
        };
        dev_split(&pool, self.cfg.protocol.dev_fraction, self.point_seed("dev", n, fold, 0))
    }

    /// Trains one sweep point and writes every checkpoint.
    pub fn train_point(
        &self,
        data: &Data,
        upstream: &UpstreamModel,
        plan: &FoldPlan,
        fold: usize,
        n: Option<usize>,
    ) -> Result<CheckpointStore> {
        (|| {
            let (tr, dev) = self.point_split(data, plan, fold, n)?;
            let mut up = upstream.clone();
            let mut head = self.head(data, n, fold)?;
            let mut cfg = self.cfg.train.clone();
            cfg.seed = self.point_seed("train", n, fold, cfg.seed);
            let store = train(&mut up, &mut head, &data.examples(&tr)?, &data.examples(&dev)?, &cfg)?;
            let dir = point_dir(n, fold);
            for ck in store.checkpoints() {
                save_checkpoint(&self.out.path(dir.join(format!("step{}.ckpt", ck.step)))?, ck)?;
            }
            Ok(store)
        })()
        .stage("train")
    }

    fn expected_train_fingerprint(&self, data: &Data, upstream: &UpstreamModel, n: Option<usize>, fold: usize) -> Result<String> {
        let mut cfg = self.cfg.train.clone();
        cfg.seed = self.point_seed("train", n, fold, cfg.seed);
        Ok(train_fingerprint(&cfg, upstream, &self.head(data, n, fold)?))
    }

    /// Reads back the checkpoints written by [`Experiment::train_point`].
    pub fn load_point_store(&self, data: &Data, upstream: &UpstreamModel, fold: usize, n: Option<usize>) -> Result<CheckpointStore> {
        (|| {
            let fp = self.expected_train_fingerprint(data, upstream, n, fold)?;
            let dir = self.out.path(point_dir(n, fold))?;
            let mut steps: Vec<u64> = std::fs::read_dir(&dir)
                .map_err(|e| Error::io(&dir, e))?
                .filter_map(|e| {
                    let name = e.ok()?.file_name().into_string().ok()?;
                    name.strip_prefix("step")?.strip_suffix(".ckpt")?.parse().ok()
                })
                .collect();
            steps.sort_unstable();
            let mut store = CheckpointStore::new(point_dir(n, fold).display().to_string());
            for s in steps {
                store.push(load_checkpoint(&dir.join(format!("step{s}.ckpt")), Some(&fp))?)?;
            }
            if store.is_empty() {
                return Err(Error::EmptyStore);
            }
            Ok(store)
        })()
        .stage("average")
    }

    /// Applies the averaging recipe and writes `averaged.ckpt`.
    pub fn average_point(&self, store: &CheckpointStore, fold: usize, n: Option<usize>) -> Result<Checkpoint> {
        (|| {
            let chosen = match self.cfg.protocol.averaging {
                Averaging::None => vec![store.best()?.clone()],
                Averaging::TopK { k } => select_top_k(store, k)?,
                Averaging::BestPlusStep { step } => select_best_plus_step(store, step)?,
            };
            let avg = average_checkpoints(&chosen)?;
            save_checkpoint(&self.out.path(point_dir(n, fold).join("averaged.ckpt"))?, &avg)?;
            Ok(avg)
        })()
        .stage("average")
    }

    pub fn load_averaged(&self, data: &Data, upstream: &UpstreamModel, fold: usize, n: Option<usize>) -> Result<Checkpoint> {
        let fp = self.expected_train_fingerprint(data, upstream, n, fold)?;
        load_checkpoint(&self.out.path(point_dir(n, fold).join("averaged.ckpt"))?, Some(&fp)).stage("eval")
    }

    /// Evaluates an averaged checkpoint on the fold's test speakers and
    /// writes `report.json`.
    pub fn eval_point(
        &self,
        data: &Data,
        upstream: &UpstreamModel,
        plan: &FoldPlan,
        fold: usize,
        n: Option<usize>,
        averaged: &Checkpoint,
    ) -> Result<EvalReport> {
        (|| {
            let (_, test_m) = plan.split(&data.manifest, fold)?;
            let mut up = upstream.clone();
            let mut head = self.head(data, n, fold)?;
            averaged.apply(&mut up, &mut head)?;
            let mut report = duration_sliced_eval(
                &up,
                &head,
                &data.test_set(&test_m)?,
                &self.cfg.protocol.durations,
                self.cfg.protocol.eer_mode,
            )?;
            report.metrics = self.cfg.task.metrics.clone();
            report.fold = fold;
            report.n_per_class = n;
            report.seed = self.cfg.seed;
            report.averaging = self.cfg.protocol.averaging.to_string();
            report.config_fingerprint = self.fingerprint.clone();
            let json = serde_json::to_string_pretty(&report)? + "\n";
            self.out.write(point_dir(n, fold).join("report.json"), json.as_bytes())?;
            Ok(report)
        })()
        .stage("eval")
    }

    /// Train, average and evaluate every fold at every sweep point.
    pub fn sweep(&self, data: &Data, upstream: &UpstreamModel) -> Result<Vec<EvalReport>> {
        let plan = self.folds(&data.manifest)?;
        let mut reports = Vec::new();
        for n in self.cfg.protocol.sweep_points() {
            for fold in 0..plan.k {
                let store = self.train_point(data, upstream, &plan, fold, n)?;
                let avg = self.average_point(&store, fold, n)?;
                reports.push(self.eval_point(data, upstream, &plan, fold, n, &avg)?);
            }
        }
        Ok(reports)
    }

    /// Reads every `report.json` under `runs/`, refusing foreign ones.
    pub fn collect_reports(&self) -> Result<Vec<EvalReport>> {
        (|| {
            let mut reports = Vec::new();
            for n in self.cfg.protocol.sweep_points() {
                for fold in 0..self.cfg.protocol.folds {
                    let p = self.out.path(point_dir(n, fold).join("report.json"))?;
                    if !p.is_file() {
                        continue;
                    }
                    let text = std::fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
                    let r: EvalReport = serde_json::from_str(&text)?;
                    if r.config_fingerprint != self.fingerprint {
                        return Err(Error::FingerprintMismatch {
                            expected: self.fingerprint.clone(),
                            found: r.config_fingerprint,
                        });
                    }
                    reports.push(r);
                }
            }
            Ok(reports)
        })()
        .stage("report")
    }

    pub fn report(&self, reports: &[EvalReport]) -> Result<PathBuf> {
        let p = self.out.path("curves.csv").stage("report")?;
        emit_report(reports, &p).stage("report")?;
        Ok(p)
    }
}

#[derive(Debug, Clone)]
pub struct RunSummary {
    pub reports: Vec<EvalReport>,
    pub curves: PathBuf,
}

/// Runs the whole recipe. Errors name the failing stage.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<RunSummary> {
    let exp = Experiment::new(cfg.clone()).stage("config")?;
    exp.init().stage("init")?;
    let corpus = if cfg.synth.is_some() { exp.synth()? } else { exp.corpus()? };
    let data = exp.load_data(corpus)?;
    let upstream = match &cfg.upstream_checkpoint {
        Some(_) => exp.upstream(&data)?,
        None => {
            let cb = exp.kmeans(&data)?;
            exp.pretrain(&data, &cb)?.0
        }
    };
    let reports = exp.sweep(&data, &upstream)?;
    let curves = exp.report(&reports)?;
    Ok(RunSummary { reports, curves })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::parse_str;

    #[test]
    fn out_dir_refuses_escapes() {
        let o = OutDir::new("/tmp/x");
        assert!(o.path("a/b.ckpt").is_ok());
        assert!(matches!(o.path("../a"), Err(Error::OutsideOutputDir(_))));
        assert!(matches!(o.path("a/../../b"), Err(Error::OutsideOutputDir(_))));
        assert!(matches!(o.path("/etc/passwd"), Err(Error::OutsideOutputDir(_))));
        assert_eq!(Error::OutsideOutputDir("x".into()).exit_code(), 5);
    }

    #[test]
    fn missing_corpus_names_the_stage() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = parse_str("").unwrap();
        cfg.output_dir = dir.path().join("o");
        let e = run_experiment(&cfg).unwrap_err();
        assert!(e.to_string().contains("stage `corpus`"), "{e}");
        assert_eq!(e.exit_code(), 3);
    }

    #[test]
    fn point_dirs() {
        assert_eq!(point_dir(Some(25), 3), Path::new("runs/n25/fold3"));
        assert_eq!(point_dir(None, 0), Path::new("runs/full/fold0"));
    }
}
