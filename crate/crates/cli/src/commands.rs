use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use selfpose_core::config::{CampaignConfig, ConfigError, CONFIG_VERSION};
use selfpose_core::geometry::ply;
use selfpose_core::labeling::{build_training_set, label_task};
use selfpose_core::learner::{curve_csv, learning_curve, training_pairs, CurveParams};
use selfpose_core::sim::{run_campaign, SimError};
use selfpose_core::store::{Body, EpisodeStore, Level, Record, StoreError, StoredPose};

pub const STORE_FILE: &str = "store.log";
pub const CONFIG_FILE: &str = "config.toml";

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config: {0}")]
    Config(#[from] ConfigError),
    #[error("store: {0}")]
    Store(#[from] StoreError),
    #[error("{0}")]
    Sim(SimError),
    #[error("{0} not found")]
    Missing(PathBuf),
    #[error("{0}: {1}")]
    Io(PathBuf, std::io::Error),
}

impl From<SimError> for CliError {
    fn from(e: SimError) -> Self {
        match e {
            SimError::Config(c) => CliError::Config(c),
            SimError::Store(s) => CliError::Store(s),
            other => CliError::Sim(other),
        }
    }
}

impl CliError {
    /// 2 config, 3 store integrity, 4 not found, 5 would overwrite, 1 other.
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Store(e) => match e {
                StoreError::Integrity { .. }
                | StoreError::Schema { .. }
                | StoreError::Parse { .. }
                | StoreError::InvalidField(_) => 3,
                StoreError::NotFound(_) => 4,
                StoreError::WouldOverwrite(_) => 5,
                StoreError::Io(_) => 1,
            },
            CliError::Missing(_) => 4,
            CliError::Sim(_) | CliError::Io(..) => 1,
        }
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |e| CliError::Io(path.to_path_buf(), e)
}

/// Creates `path`, refusing to replace an existing file.
fn create_new(path: &Path) -> Result<BufWriter<File>, CliError> {
    match OpenOptions::new().write(true).create_new(true).open(path) {
        Ok(f) => Ok(BufWriter::new(f)),
        Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => {
            Err(StoreError::WouldOverwrite(path.to_path_buf()).into())
        }
        Err(e) => Err(CliError::Io(path.to_path_buf(), e)),
    }
}

fn load_store(path: &Path) -> Result<EpisodeStore, CliError> {
    if !path.is_file() {
        return Err(CliError::Missing(path.to_path_buf()));
    }
    let store = EpisodeStore::load(path)?;
    store.check_integrity()?;
    Ok(store)
}

fn store_dir(store_path: &Path) -> PathBuf {
    store_path.parent().map_or_else(|| PathBuf::from("."), Path::to_path_buf)
}

/// The config saved next to a store by `run`, or the defaults when absent.
fn config_for(store_path: &Path) -> Result<CampaignConfig, CliError> {
    let path = store_dir(store_path).join(CONFIG_FILE);
    if path.is_file() {
        Ok(CampaignConfig::load(&path)?)
    } else {
        log::warn!("{} not found; using default config", path.display());
        Ok(CampaignConfig::default())
    }
}

fn kv(key: &str, value: impl std::fmt::Display) {
    println!("{key}={value}");
}

pub fn run(config: &Path, seed: Option<u64>, out: Option<&Path>) -> Result<(), CliError> {
    let mut cfg = CampaignConfig::load(config)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    let out = out.map_or_else(|| PathBuf::from(&cfg.output.dir), Path::to_path_buf);
    cfg.output.dir = out.display().to_string();
    cfg.validate()?;
    let model = cfg.object.build().map_err(SimError::from)?;

    fs::create_dir_all(&out).map_err(io_err(&out))?;
    let store_path = out.join(STORE_FILE);
    let mut store = EpisodeStore::create(&store_path)?;
    let config_path = out.join(CONFIG_FILE);
    fs::write(&config_path, cfg.to_toml_string()).map_err(io_err(&config_path))?;

    let started = std::time::Instant::now();
    let r = run_campaign(&cfg, &model, &mut store, cfg.output.write_clouds.then_some(out.as_path()))?;
    log::info!("campaign finished in {:.1} s", started.elapsed().as_secs_f64());
    if !r.reached_targets {
        eprintln!("warning: episode cap reached with {} of {} samples", r.accepted, cfg.targets.total());
    }
    kv("store", store_path.display());
    kv("episodes", r.episodes);
    kv("accepted", r.accepted);
    kv("accepted_train", r.accepted_train);
    kv("accepted_test", r.accepted_test);
    kv("acceptance_rate", format!("{:.4}", r.acceptance_rate()));
    kv("no_detection", r.no_detection);
    kv("held", r.held);
    kv("dropped", r.dropped);
    kv("missed", r.missed);
    kv("pushed_out", r.pushed_out);
    kv("insertions_succeeded", r.insertions_succeeded);
    kv("reached_targets", r.reached_targets);
    Ok(())
}

pub fn label(store_path: &Path, export: Option<&Path>) -> Result<(), CliError> {
    let store = load_store(store_path)?;
    let cfg = config_for(store_path)?;
    let model = cfg.object.build().map_err(SimError::from)?;
    let tasks: Vec<u64> = store.iter_level(Level::Task).map(|r| r.id).collect();
    let (mut accepted, mut discarded, mut flipped) = (0usize, 0usize, 0usize);
    let mut samples = Vec::new();
    for &task in &tasks {
        for d in label_task(&store, task, &model, &cfg.thresholds)? {
            if d.accepted() {
                accepted += 1;
                flipped += d.verification.flipped as usize;
            } else {
                discarded += 1;
            }
        }
        if export.is_some() {
            samples.extend(build_training_set(&store, task, &model, &cfg.thresholds)?);
        }
    }
    if let Some(path) = export {
        let mut w = BufWriter::new(File::create(path).map_err(io_err(path))?);
        for s in &samples {
            writeln!(w, "{}", s.export_line()).map_err(io_err(path))?;
        }
        w.flush().map_err(io_err(path))?;
        kv("export", path.display());
    }
    kv("tasks", tasks.len());
    kv("episodes", accepted + discarded);
    kv("accepted", accepted);
    kv("discarded", discarded);
    kv("accepted_flipped", flipped);
    Ok(())
}

pub fn curve(
    store_path: &Path,
    checkpoints: &[usize],
    seeds: &[u64],
    episodes: usize,
    csv: Option<&Path>,
    out: Option<&Path>,
) -> Result<(), CliError> {
    if episodes == 0 {
        return Err(ConfigError::Invalid("episodes".into()).into());
    }
    let store = load_store(store_path)?;
    let cfg = config_for(store_path)?;
    let model = cfg.object.build().map_err(SimError::from)?;
    let mut samples = Vec::new();
    for task in store.iter_level(Level::Task) {
        samples.extend(training_pairs(&store, task.id, &model, &cfg.thresholds, &cfg.targets)?);
    }
    let skipped: Vec<_> = checkpoints.iter().filter(|&&n| n > samples.len()).collect();
    if !skipped.is_empty() {
        eprintln!("warning: only {} training samples; dropping checkpoints {skipped:?}", samples.len());
    }
    let params = CurveParams { checkpoints: checkpoints.to_vec(), seeds: seeds.to_vec(), test_episodes: episodes };
    let points = learning_curve(&samples, &params, &cfg.error_model, &model, &cfg.bin, &cfg.thresholds)?;

    let csv_path = match (csv, out) {
        (Some(p), _) => p.to_path_buf(),
        (None, Some(dir)) => dir.join("curve.csv"),
        (None, None) => store_dir(store_path).join("curve.csv"),
    };
    if let Some(dir) = csv_path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    fs::write(&csv_path, curve_csv(&points)).map_err(io_err(&csv_path))?;
    kv("csv", csv_path.display());
    kv("training_samples", samples.len());
    let mut ns: Vec<usize> = points.iter().map(|p| p.n_samples).collect();
    ns.dedup();
    for n in ns {
        let rs: Vec<f64> = points.iter().filter(|p| p.n_samples == n).map(|p| p.recall).collect();
        println!("n_samples={n} mean_recall={:.4}", rs.iter().sum::<f64>() / rs.len() as f64);
    }
    Ok(())
}

fn pose_str(p: &StoredPose) -> String {
    let t = p.to_pose();
    let z = t.z_axis();
    format!(
        "t=({:.3},{:.3},{:.3}) z_axis=({:.4},{:.4},{:.4})",
        t.translation().x,
        t.translation().y,
        t.translation().z,
        z.x,
        z.y,
        z.z
    )
}

fn describe(r: &Record) -> String {
    let fields = match &r.body {
        Body::Task { object_id, network_type } => format!("object_id={object_id} network_type={network_type}"),
        Body::Cloud { task_id, cloud_file, timestamp_ms } => {
            format!("task={task_id} file={cloud_file} timestamp_ms={timestamp_ms}")
        }
        Body::PoseEst { cloud_id, pose, score } => format!("cloud={cloud_id} score={score} {}", pose_str(pose)),
        Body::Grasp { pose_est_id, grasp_in_object_frame, succeeded } => {
            format!("pose_est={pose_est_id} succeeded={succeeded} grasp {}", pose_str(grasp_in_object_frame))
        }
        Body::InHand { grasp_id, measured_pose, expected_pose } => format!(
            "grasp={grasp_id} measured {} expected {}",
            pose_str(measured_pose),
            pose_str(expected_pose)
        ),
        Body::Insertion { inhand_id, succeeded } => format!("inhand={inhand_id} succeeded={succeeded}"),
    };
    format!("{} id={} {fields}", r.level(), r.id)
}

pub fn inspect(store_path: &Path, id: u64) -> Result<(), CliError> {
    let store = load_store(store_path)?;
    let rec = store.get(id).ok_or(StoreError::NotFound(id))?;
    if rec.level() == Level::Task {
        println!("{}", describe(rec));
        let mut counts = [0usize; 6];
        let mut stack = vec![id];
        while let Some(cur) = stack.pop() {
            for c in store.children(cur)? {
                counts[c.level() as usize] += 1;
                stack.push(c.id);
            }
        }
        kv("clouds", counts[Level::Cloud as usize]);
        kv("pose_estimates", counts[Level::PoseEst as usize]);
        kv("grasps", counts[Level::Grasp as usize]);
        kv("inhand", counts[Level::InHand as usize]);
        kv("insertions", counts[Level::Insertion as usize]);
    } else {
        let mut chain = store.ancestors(id)?;
        chain.reverse();
        for r in chain {
            println!("{}", describe(r));
        }
    }
    Ok(())
}

pub fn gen_model(config: Option<&Path>, seed: Option<u64>, out: Option<&Path>) -> Result<(), CliError> {
    let mut cfg = match config {
        Some(p) => CampaignConfig::load(p)?,
        None => CampaignConfig::default(),
    };
    if let Some(s) = seed {
        cfg.object.model_seed = s;
        cfg.validate()?;
    }
    let model = cfg.object.build().map_err(SimError::from)?;
    let out = out.map_or_else(|| PathBuf::from("."), Path::to_path_buf);
    fs::create_dir_all(&out).map_err(io_err(&out))?;
    let model_path = out.join("model.ply");
    let mut w = create_new(&model_path)?;
    ply::write_ply_binary(&mut w, model.surface()).and_then(|_| w.flush()).map_err(io_err(&model_path))?;
    kv("model", model_path.display());
    if config.is_none() {
        let config_path = out.join(CONFIG_FILE);
        let mut w = create_new(&config_path)?;
        w.write_all(cfg.to_toml_string().as_bytes()).and_then(|_| w.flush()).map_err(io_err(&config_path))?;
        kv("config", config_path.display());
    }
    kv("object_id", model.id());
    kv("points", model.points().len());
    kv("diameter_mm", format!("{:.4}", model.diameter()));
    kv("config_version", CONFIG_VERSION);
    Ok(())
}
