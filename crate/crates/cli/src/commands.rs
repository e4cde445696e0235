//! Pipeline subcommands. Each one reads a [`RunConfig`], writes its outputs
//! plus a frozen `run.cfg` and a `log.txt` into the output directory.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use serde::Serialize;
use shootseg::cloud::{load_cloud, save_cloud, CloudFormat, LEAF, SOIL};
use shootseg::cluster::InstancePrediction;
use shootseg::config::RunConfig;
use shootseg::metrics::{gt_instances, instance_ap, semantic_metrics, ApReport, Interpolation, ScoredInstance, SemanticReport};
use shootseg::nn::{Checkpoint, TrainEvent};
use shootseg::sampling::{make_weak_labels, random_subsample, strip_class};
use shootseg::segment::{finetune, infer, FinetuneInit, Task, TrainSample, FINETUNE_LOG_HEADER};
use shootseg::synth::{generate_plant, random_spec};
use shootseg::traits::{extract_traits, TRAIT_CSV_HEADER};
use shootseg::vib::{pretrain, LOSS_LOG_HEADER};
use shootseg::{PointCloud, WeakLabels};

use crate::error::{CliError, CliResult};
use crate::manifest::{Entry, Manifest, Split};

/// Output directory plus the run log mirrored to standard error.
pub struct Run {
    pub cfg: RunConfig,
    pub out: PathBuf,
    log: fs::File,
}

impl Run {
    pub fn create(cfg: RunConfig, out: &Path) -> CliResult<Self> {
        fs::create_dir_all(out).map_err(|e| CliError::io(out, e))?;
        write_file(&out.join("run.cfg"), cfg.to_text().as_bytes())?;
        let log_path = out.join("log.txt");
        let log = fs::File::create(&log_path).map_err(|e| CliError::io(&log_path, e))?;
        Ok(Self {
            cfg,
            out: out.to_path_buf(),
            log,
        })
    }

    pub fn log(&mut self, line: impl AsRef<str>) -> CliResult<()> {
        let line = line.as_ref();
        eprintln!("{line}");
        writeln!(self.log, "{line}").map_err(|e| CliError::io(&self.out.join("log.txt"), e))
    }

    fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }
}

pub fn write_file(path: &Path, bytes: &[u8]) -> CliResult<()> {
    fs::write(path, bytes).map_err(|e| CliError::io(path, e))
}

fn load(path: &Path) -> CliResult<PointCloud> {
    Ok(load_cloud(path, CloudFormat::from_path(path))?)
}

fn file_stem(path: &Path) -> String {
    path.file_stem().and_then(|s| s.to_str()).unwrap_or("cloud").to_string()
}

/// Per-cloud seed: clouds are numbered from 0 within a manifest.
fn cloud_seed(seed: u64, index: usize, salt: u64) -> u64 {
    seed.wrapping_mul(1_000_003)
        .wrapping_add(index as u64)
        .wrapping_add(salt << 32)
}

pub fn synth(run: &mut Run) -> CliResult<()> {
    let opts = run.cfg.synth()?;
    let count = run.cfg.usize("synth.count")?;
    let holdout = run.cfg.usize("synth.holdout")?;
    let seed = run.cfg.u64("seed")?;
    if count == 0 || holdout > count {
        return Err(CliError::Config("synth.holdout must not exceed synth.count, which must be positive".into()));
    }
    let mut manifest = Manifest::default();
    let mut truth_csv = String::from("plant,trait,organ_id,value_mm\n");
    for i in 0..count {
        let name = format!("plant_{i:03}");
        let (mut cloud, truth) = generate_plant(&random_spec(cloud_seed(seed, i, 0), &opts))?;
        cloud.set_source_id(name.as_str());
        let file = format!("{name}.xyzl");
        save_cloud(&cloud, &run.path(&file), CloudFormat::XyzlText)?;
        truth_csv.push_str(&truth.csv_rows(&name));
        let split = if i < count - holdout { Split::Train } else { Split::Val };
        manifest.entries.push(Entry {
            split,
            cloud: PathBuf::from(&file),
            weak: None,
        });
        run.log(format!("{file} points={} leaves={}", cloud.len(), truth.leaves.len()))?;
    }
    write_file(&run.path("truth.csv"), truth_csv.as_bytes())?;
    write_file(&run.path("manifest.txt"), manifest.to_text().as_bytes())?;
    run.log(format!("wrote {count} plants ({} train, {holdout} val)", count - holdout))
}

/// Entries to process: the manifest when set, otherwise `data.input` as a
/// single training cloud with optional `data.weak`.
fn inputs(cfg: &RunConfig) -> CliResult<Manifest> {
    if let Some(m) = cfg.path("data.manifest") {
        return Manifest::load(m);
    }
    let input = cfg.require_path("data.input").map_err(|_| {
        CliError::Config("one of data.manifest or data.input must be set".into())
    })?;
    Ok(Manifest {
        entries: vec![Entry {
            split: Split::Train,
            cloud: input.to_path_buf(),
            weak: cfg.path("data.weak").map(Path::to_path_buf),
        }],
    })
}

pub fn weaklabel(run: &mut Run) -> CliResult<()> {
    let manifest = inputs(&run.cfg)?;
    let k = run.cfg.usize("weak.k")?;
    let ratio = run.cfg.f64("weak.ratio")?;
    let strip = run.cfg.bool("weak.strip_soil")?;
    let stratified = run.cfg.bool("weak.stratified")?;
    let seed = run.cfg.u64("seed")?;
    let mut out = Manifest::default();
    for (i, e) in manifest.entries.iter().enumerate() {
        if e.split == Split::Val {
            out.entries.push(Entry {
                split: Split::Val,
                cloud: absolute(&e.cloud)?,
                weak: None,
            });
            continue;
        }
        let mut cloud = load(&e.cloud)?;
        if strip {
            cloud = strip_class(&cloud, SOIL);
        }
        let sub = random_subsample(&cloud, ratio, cloud_seed(seed, i, 1))?;
        let weak = make_weak_labels(&sub, k, cloud_seed(seed, i, 2), stratified)?;
        let name = file_stem(&e.cloud);
        let cloud_file = format!("{name}.sub.xyzl");
        let weak_file = format!("{name}.weak");
        save_cloud(&sub, &run.path(&cloud_file), CloudFormat::XyzlText)?;
        weak.save(&run.path(&weak_file))?;
        run.log(format!("{cloud_file} points={} labeled={}", sub.len(), weak.len()))?;
        out.entries.push(Entry {
            split: Split::Train,
            cloud: PathBuf::from(cloud_file),
            weak: Some(PathBuf::from(weak_file)),
        });
    }
    write_file(&run.path("manifest.txt"), out.to_text().as_bytes())?;
    run.log(format!("wrote {} weak-label files", out.train().count()))
}

fn absolute(path: &Path) -> CliResult<PathBuf> {
    std::path::absolute(path).map_err(|e| CliError::io(path, e))
}

/// Streams the loss log and periodic checkpoints of a training run.
struct TrainOutput<'a> {
    run: &'a mut Run,
    csv: String,
    every: usize,
    error: Option<CliError>,
}

impl<'a> TrainOutput<'a> {
    fn new(run: &'a mut Run, header: &str, total: usize) -> Self {
        Self {
            run,
            csv: format!("{header}\n"),
            every: (total / 10).max(1),
            error: None,
        }
    }

    fn observe(&mut self, event: TrainEvent) {
        match event {
            TrainEvent::Iteration(l) => {
                let mut row = format!("{},{},{}", l.iter, l.lr, l.loss);
                for p in &l.parts {
                    row.push_str(&format!(",{p}"));
                }
                self.csv.push_str(&row);
                self.csv.push('\n');
                if l.iter % self.every == 0 {
                    let r = self.run.log(format!("iter {} lr {:.6} loss {:.6}", l.iter, l.lr, l.loss));
                    self.keep(r);
                }
            }
            TrainEvent::Checkpoint(ck) => {
                let name = format!("ckpt_{:06}.ckpt", ck.meta.iteration);
                let r = ck.save(&self.run.path(&name)).map_err(CliError::from);
                self.keep(r);
            }
        }
    }

    fn keep(&mut self, r: CliResult<()>) {
        if let Err(e) = r {
            self.error.get_or_insert(e);
        }
    }

    fn finish(self, result: shootseg::Result<Checkpoint>, name: &str) -> CliResult<Checkpoint> {
        write_file(&self.run.path("loss.csv"), self.csv.as_bytes())?;
        if let Some(e) = self.error {
            return Err(e);
        }
        match result {
            Ok(ck) => {
                ck.save(&self.run.path(name))?;
                self.run.log(format!("wrote {name} iteration={}", ck.meta.iteration))?;
                Ok(ck)
            }
            Err(shootseg::Error::Diverged { iteration, last_good }) => {
                last_good.save(&self.run.path("last_good.ckpt"))?;
                Err(CliError::Data(format!(
                    "training diverged at iteration {iteration}; last good parameters in last_good.ckpt"
                )))
            }
            Err(e) => Err(e.into()),
        }
    }
}

pub fn pretrain_cmd(run: &mut Run) -> CliResult<()> {
    let manifest = inputs(&run.cfg)?;
    let clouds = manifest.train().map(|e| load(&e.cloud)).collect::<CliResult<Vec<_>>>()?;
    let backbone = run.cfg.backbone()?;
    let cfg = run.cfg.pretrain()?;
    let resume = run.cfg.path("model.checkpoint").map(Checkpoint::load).transpose()?;
    run.log(format!("pretraining on {} clouds for {} iterations", clouds.len(), cfg.schedule.iterations))?;
    let mut out = TrainOutput::new(run, LOSS_LOG_HEADER, cfg.schedule.iterations);
    let result = pretrain(&clouds, backbone, &cfg, resume, &mut |e| out.observe(e));
    out.finish(result, "pretrain.ckpt").map(|_| ())
}

pub fn finetune_cmd(run: &mut Run, task: Task) -> CliResult<()> {
    let manifest = inputs(&run.cfg)?;
    let mut samples = Vec::new();
    for e in manifest.train() {
        let weak_path = e
            .weak
            .as_ref()
            .ok_or_else(|| CliError::Config(format!("{} has no weak-label file", e.cloud.display())))?;
        samples.push(TrainSample {
            cloud: load(&e.cloud)?,
            weak: WeakLabels::load(weak_path)?,
        });
    }
    let cfg = run.cfg.finetune(task)?;
    let init = match run.cfg.get("finetune.init") {
        "random" => FinetuneInit::Random(run.cfg.backbone()?),
        "pretrained" => FinetuneInit::Pretrained(Checkpoint::load(run.cfg.require_path("model.checkpoint")?)?),
        "resume" => FinetuneInit::Resume(Checkpoint::load(run.cfg.require_path("model.checkpoint")?)?),
        other => return Err(CliError::Config(format!("finetune.init: unknown value '{other}'"))),
    };
    run.log(format!(
        "{} fine-tuning on {} clouds for {} iterations (init {})",
        task.kind(),
        samples.len(),
        cfg.schedule.iterations,
        run.cfg.get("finetune.init")
    ))?;
    let mut out = TrainOutput::new(run, FINETUNE_LOG_HEADER, cfg.schedule.iterations);
    let result = finetune(init, &samples, &cfg, &mut |e| out.observe(e));
    out.finish(result, "model.ckpt").map(|_| ())
}

/// Predicted instances as written next to each predicted cloud.
#[derive(Serialize, serde::Deserialize)]
pub struct InstanceFile {
    pub cloud_id: String,
    pub instances: Vec<InstancePrediction>,
}

pub fn infer_cmd(run: &mut Run) -> CliResult<()> {
    let model = Checkpoint::load(run.cfg.require_path("model.checkpoint")?)?.to_model()?;
    let cluster = run.cfg.cluster()?;
    let targets: Vec<PathBuf> = match run.cfg.path("data.manifest") {
        Some(m) => Manifest::load(m)?.val().map(|e| e.cloud.clone()).collect(),
        None => vec![run.cfg.require_path("data.input")?.to_path_buf()],
    };
    for path in targets {
        let cloud = load(&path)?;
        let pred = infer(&model, &cloud, &cluster)?;
        let name = file_stem(&path);
        let instance = pred.offsets.is_some().then(|| pred.instance_labels.clone());
        let labeled = cloud.without_labels().with_labels(Some(pred.semantic.clone()), instance)?;
        save_cloud(&labeled, &run.path(&format!("{name}.pred.xyzl")), CloudFormat::XyzlText)?;
        let file = InstanceFile {
            cloud_id: name.clone(),
            instances: pred.instances,
        };
        let json = serde_json::to_string(&file).map_err(|e| CliError::Data(e.to_string()))?;
        write_file(&run.path(&format!("{name}.instances.json")), json.as_bytes())?;
        let leaf = pred.semantic.iter().filter(|&&s| s == LEAF).count();
        run.log(format!(
            "{name} points={} leaf_points={leaf} instances={}",
            labeled.len(),
            file.instances.len()
        ))?;
    }
    Ok(())
}

#[derive(Serialize)]
struct CloudReport {
    cloud: String,
    semantic: SemanticReport,
    #[serde(skip_serializing_if = "Option::is_none")]
    instance: Option<ApReport>,
}

#[derive(Serialize)]
struct EvalReport {
    clouds: Vec<CloudReport>,
    mean_miou: f64,
    mean_f1: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    mean_ap: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    mean_ap50: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    mean_ap25: Option<f64>,
}

/// Scored instances of a prediction: the `.instances.json` written by
/// `infer` when present, otherwise the label groups with score 1.
fn predicted_instances(pred_path: &Path, pred: &PointCloud) -> CliResult<Option<Vec<ScoredInstance>>> {
    let name = file_stem(pred_path);
    let stem = name.strip_suffix(".pred").unwrap_or(&name);
    let json = pred_path.with_file_name(format!("{stem}.instances.json"));
    if json.exists() {
        let text = fs::read_to_string(&json).map_err(|e| CliError::io(&json, e))?;
        let file: InstanceFile =
            serde_json::from_str(&text).map_err(|e| CliError::Data(format!("{}: {e}", json.display())))?;
        return Ok(Some(
            file.instances
                .into_iter()
                .map(|p| ScoredInstance {
                    indices: p.indices,
                    score: p.score,
                })
                .collect(),
        ));
    }
    Ok(match (pred.semantic(), pred.instance()) {
        (Some(s), Some(i)) => Some(
            gt_instances(s, i, LEAF)
                .into_iter()
                .map(|indices| ScoredInstance { indices, score: 1.0 })
                .collect(),
        ),
        _ => None,
    })
}

fn evaluate_pair(pred_path: &Path, truth_path: &Path, classes: &[i32]) -> CliResult<CloudReport> {
    let pred = load(pred_path)?;
    let truth = load(truth_path)?;
    let missing = |p: &Path| CliError::Data(format!("{} has no semantic labels", p.display()));
    let ps = pred.semantic().ok_or_else(|| missing(pred_path))?;
    let ts = truth.semantic().ok_or_else(|| missing(truth_path))?;
    let semantic = semantic_metrics(ps, ts, classes)?;
    let instance = match (predicted_instances(pred_path, &pred)?, truth.instance()) {
        (Some(preds), Some(ti)) => {
            let gt = gt_instances(ts, ti, LEAF);
            if gt.is_empty() {
                None
            } else {
                Some(instance_ap(&preds, &gt, Interpolation::AllPoint)?)
            }
        }
        _ => None,
    };
    Ok(CloudReport {
        cloud: file_stem(truth_path),
        semantic,
        instance,
    })
}

pub fn evaluate(run: &mut Run) -> CliResult<()> {
    let classes: Vec<i32> = (0..run.cfg.usize("finetune.classes")? as i32).collect();
    let pred = run.cfg.require_path("data.prediction")?.to_path_buf();
    let pairs: Vec<(PathBuf, PathBuf)> = match run.cfg.path("data.truth") {
        Some(t) => vec![(pred, t.to_path_buf())],
        None => {
            let m = run.cfg.require_path("data.manifest").map_err(|_| {
                CliError::Config("evaluate needs data.truth, or data.manifest with a prediction directory".into())
            })?;
            Manifest::load(m)?
                .val()
                .map(|e| (pred.join(format!("{}.pred.xyzl", file_stem(&e.cloud))), e.cloud.clone()))
                .collect()
        }
    };
    if pairs.is_empty() {
        return Err(CliError::Data("nothing to evaluate".into()));
    }
    let mut clouds = Vec::new();
    for (p, t) in &pairs {
        let r = evaluate_pair(p, t, &classes)?;
        let ap = r.instance.as_ref().map(|a| format!(" ap={:.6} ap50={:.6}", a.ap, a.ap50)).unwrap_or_default();
        run.log(format!("{} miou={:.6} f1={:.6}{ap}", r.cloud, r.semantic.miou, r.semantic.mean_f1))?;
        clouds.push(r);
    }
    let n = clouds.len() as f64;
    let mean = |f: &dyn Fn(&CloudReport) -> f64| clouds.iter().map(f).sum::<f64>() / n;
    let all_inst = clouds.iter().all(|c| c.instance.is_some());
    let inst_mean = |f: fn(&ApReport) -> f64| {
        all_inst.then(|| clouds.iter().map(|c| f(c.instance.as_ref().expect("checked"))).sum::<f64>() / n)
    };
    let report = EvalReport {
        mean_miou: mean(&|c| c.semantic.miou),
        mean_f1: mean(&|c| c.semantic.mean_f1),
        mean_ap: inst_mean(|a| a.ap),
        mean_ap50: inst_mean(|a| a.ap50),
        mean_ap25: inst_mean(|a| a.ap25),
        clouds,
    };
    let json = serde_json::to_string_pretty(&report).map_err(|e| CliError::Data(e.to_string()))?;
    write_file(&run.path("report.json"), json.as_bytes())?;
    let ap = report.mean_ap50.map(|v| format!(" mean_ap50={v:.6}")).unwrap_or_default();
    run.log(format!("mean_miou={:.6} mean_f1={:.6}{ap}", report.mean_miou, report.mean_f1))
}

fn cloud_files(dir: &Path) -> CliResult<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| CliError::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| matches!(p.extension().and_then(|e| e.to_str()), Some("xyzl" | "ply")))
        .collect();
    files.sort();
    Ok(files)
}

pub fn traits_cmd(run: &mut Run) -> CliResult<()> {
    let input = run.cfg.require_path("data.input")?.to_path_buf();
    let files = if input.is_dir() { cloud_files(&input)? } else { vec![input] };
    let min_points = run.cfg.usize("traits.min_leaf_points")?;
    let mut csv = format!("{TRAIT_CSV_HEADER}\n");
    for f in &files {
        let cloud = load(f)?;
        let provenance = if file_stem(f).ends_with(".pred") { "predicted" } else { "annotated" };
        let report = extract_traits(&cloud, min_points, provenance)?;
        csv.push_str(&report.csv_rows());
        for note in &report.notes {
            run.log(format!("{}: {note}", report.cloud_id))?;
        }
        run.log(format!(
            "{} stem_diameter={} leaves={}",
            report.cloud_id,
            report.stem_diameter.map_or("-".to_string(), |d| format!("{d:.4}")),
            report.leaves.len()
        ))?;
    }
    write_file(&run.path("traits.csv"), csv.as_bytes())
}

pub fn describe_checkpoint(cfg: &RunConfig, out: Option<&Path>) -> CliResult<()> {
    let text = Checkpoint::load(cfg.require_path("model.checkpoint")?)?.describe();
    print!("{text}");
    if let Some(dir) = out {
        fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
        write_file(&dir.join("run.cfg"), cfg.to_text().as_bytes())?;
        write_file(&dir.join("describe.txt"), text.as_bytes())?;
    }
    Ok(())
}
