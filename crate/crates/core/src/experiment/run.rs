use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use super::{aggregate, write_aggregate, ExperimentConfig, MethodKind, ProtocolConfig, Summary};
use crate::data::{load_cifar_batches, load_mnist, make_synthetic, Dataset, Split};
use crate::error::{Error, Result};
use crate::net::checkpoint::Checkpoint;
use crate::net::Network;
use crate::protocols::{
    make_class_split, make_mnist_permuted, make_mnist_split, rng_for, run_joint_upper_bound, run_sequential,
    ClassSplit, Method, RngStream, RunOutcome, TaskStream,
};

/// Train and test data of an experiment, loaded once for all runs.
#[derive(Debug, Clone)]
pub struct ExperimentData {
    pub train: Dataset,
    pub test: Dataset,
}

pub fn load_data(cfg: &ExperimentConfig) -> Result<ExperimentData> {
    let root = cfg.data_dir();
    let (train, test) = match &cfg.protocol {
        ProtocolConfig::MnistSplit | ProtocolConfig::MnistPermuted { .. } => load_mnist(&root)?,
        ProtocolConfig::Synthetic {
            classes,
            train_per_class,
            test_per_class,
            dim,
            separation,
            data_seed,
            ..
        } => (
            make_synthetic(*classes, *train_per_class, *dim, *separation, *data_seed, Split::Train)?,
            make_synthetic(*classes, *test_per_class, *dim, *separation, data_seed.wrapping_add(1), Split::Test)?,
        ),
        ProtocolConfig::CifarSplit {
            variant,
            train_files,
            test_files,
            ..
        } => {
            let paths = |files: &[PathBuf]| files.iter().map(|f| root.join(f)).collect::<Vec<_>>();
            let mut train = load_cifar_batches(&paths(train_files), *variant, Split::Train)?;
            let mut test = load_cifar_batches(&paths(test_files), *variant, Split::Test)?;
            let norm = crate::data::Normalization::fit(train.images.data())?;
            train.normalize(norm)?;
            test.normalize(norm)?;
            (train, test)
        }
    };
    Ok(ExperimentData { train, test })
}

fn build_stream(cfg: &ExperimentConfig, data: &ExperimentData, seed: u64) -> Result<TaskStream> {
    let (train, test) = (&data.train, &data.test);
    let stream = match &cfg.protocol {
        ProtocolConfig::MnistSplit => make_mnist_split(train, test, seed)?,
        ProtocolConfig::MnistPermuted { n_tasks } => make_mnist_permuted(train, test, *n_tasks, seed)?,
        ProtocolConfig::Synthetic {
            classes,
            classes_per_task,
            ..
        } => {
            let groups = (0..*classes).collect::<Vec<_>>().chunks(*classes_per_task).map(<[usize]>::to_vec).collect();
            let mut s = make_class_split(train, test, &ClassSplit::Semantic { groups }, seed)?;
            s.protocol = "synthetic".into();
            s
        }
        ProtocolConfig::CifarSplit { split, .. } => make_class_split(train, test, split, seed)?,
    };
    match cfg.experiment.validation_fraction {
        Some(f) => stream.with_validation(train, f),
        None => Ok(stream),
    }
}

/// Builds and initializes the network for `seed`; every method of a seed
/// starts from the same weights.
pub fn initial_network(cfg: &ExperimentConfig, data: &ExperimentData, stream: &TaskStream, seed: u64) -> Result<Network> {
    let mut net = cfg.model.build(data.train.sample_shape(), &stream.heads())?;
    net.init_uniform(&mut rng_for(seed, RngStream::Init));
    Ok(net)
}

/// Result of one (seed, method) run.
#[derive(Debug, Clone)]
pub struct RunRecord {
    pub method: MethodKind,
    pub seed: u64,
    pub outcome: RunOutcome,
    pub network: Network,
}

impl RunRecord {
    pub fn id(&self, protocol: &str) -> String {
        run_id(protocol, self.method, self.seed)
    }
}

fn run_id(protocol: &str, method: MethodKind, seed: u64) -> String {
    format!("{protocol}_{}_seed{seed}", method.name())
}

pub fn run_one(cfg: &ExperimentConfig, data: &ExperimentData, seed: u64, method: MethodKind) -> Result<RunRecord> {
    let stream = build_stream(cfg, data, seed)?;
    let mut net = initial_network(cfg, data, &stream, seed)?;
    let train = cfg.train.to_config();
    let outcome = match method {
        MethodKind::Baseline => run_sequential(&mut net, &stream, &data.train, &data.test, &Method::Baseline, &train, seed)?,
        MethodKind::Tbe => {
            let tbe = Method::Tbe(cfg.tbe.to_config()?);
            run_sequential(&mut net, &stream, &data.train, &data.test, &tbe, &train, seed)?
        }
        MethodKind::Joint => run_joint_upper_bound(&mut net, &stream, &data.train, &data.test, &train, seed)?,
    };
    Ok(RunRecord {
        method,
        seed,
        outcome,
        network: net,
    })
}

/// Trains every job, fanning out over `experiment.workers` threads. Each
/// run owns its network and RNG streams, so results do not depend on the
/// worker count.
fn run_jobs(cfg: &ExperimentConfig, data: &ExperimentData, jobs: &[(u64, MethodKind)]) -> Vec<Result<RunRecord>> {
    let workers = cfg.experiment.workers.clamp(1, jobs.len().max(1));
    let next = AtomicUsize::new(0);
    let slots: Vec<Mutex<Option<Result<RunRecord>>>> = jobs.iter().map(|_| Mutex::new(None)).collect();
    let work = || loop {
        let i = next.fetch_add(1, Ordering::Relaxed);
        let Some(&(seed, method)) = jobs.get(i) else { break };
        let id = run_id(cfg.protocol.name(), method, seed);
        log::info!("starting {id}");
        let rec = run_one(cfg, data, seed, method);
        if let Ok(r) = &rec {
            log::info!("finished {id}: final mean accuracy {:.2}", r.outcome.metrics.final_mean().unwrap_or(f64::NAN));
        }
        *slots[i].lock().expect("no worker panics while holding a slot") = Some(rec);
    };
    if workers == 1 {
        work();
    } else {
        std::thread::scope(|s| {
            for _ in 0..workers {
                s.spawn(work);
            }
        });
    }
    slots
        .into_iter()
        .map(|m| m.into_inner().expect("slot lock").expect("every job ran"))
        .collect()
}

fn write_file(path: &Path, write: impl FnOnce(&mut Vec<u8>) -> Result<()>) -> Result<()> {
    let mut buf = Vec::new();
    write(&mut buf)?;
    fs::write(path, buf)?;
    Ok(())
}

/// Runs every seed and method, writing per-run metrics, plan audits,
/// checkpoints, the resolved config, timing, and the aggregate summary
/// under `experiment.output_dir`.
pub fn run_experiment(cfg: &ExperimentConfig, data: &ExperimentData) -> Result<Summary> {
    let out = &cfg.experiment.output_dir;
    let hash = cfg.hash();
    let protocol = cfg.protocol.name();
    for sub in ["runs", "audit", "checkpoints"] {
        fs::create_dir_all(out.join(sub))?;
    }
    fs::write(out.join("config.toml"), cfg.to_toml())?;
    let mut timing = csv::Writer::from_writer(Vec::new());
    timing.write_record(["run", "stage", "seconds"])?;
    let jobs: Vec<(u64, MethodKind)> = cfg
        .experiment
        .seeds
        .iter()
        .flat_map(|&s| cfg.experiment.methods.iter().map(move |&m| (s, m)))
        .collect();
    let records = run_jobs(cfg, data, &jobs);
    let mut metrics = Vec::new();
    for (&(seed, method), rec) in jobs.iter().zip(records) {
        let id = run_id(protocol, method, seed);
        let rec = rec.map_err(|e| Error::Run {
            id: id.clone(),
            source: Box::new(e),
        })?;
        let m = &rec.outcome.metrics;
        write_file(&out.join("runs").join(format!("{id}.csv")), |w| m.write_csv(w, &hash))?;
        for (task, plan) in rec.outcome.plans.iter().enumerate() {
            write_file(&out.join("audit").join(format!("{id}_task{task}.csv")), |w| plan.write_audit_csv(w))?;
        }
        if cfg.experiment.checkpoints {
            let mut ckpt = Checkpoint::new(rec.network.clone());
            ckpt.freeze = Some(rec.outcome.freeze.clone());
            let meta = &mut ckpt.metadata;
            meta.insert("config_hash".into(), hash.clone());
            meta.insert("protocol".into(), protocol.into());
            meta.insert("method".into(), method.name().into());
            meta.insert("seed".into(), seed.to_string());
            if let Some(n) = data.train.normalization {
                meta.insert("normalization_mean".into(), format!("{:?}", n.mean));
                meta.insert("normalization_std".into(), format!("{:?}", n.std));
            }
            ckpt.save(&out.join("checkpoints").join(format!("{id}.tbe")))?;
        }
        for (stage, secs) in m.stage_seconds.iter().enumerate() {
            timing.write_record([id.clone(), stage.to_string(), format!("{secs:.3}")])?;
        }
        metrics.push((rec.outcome.metrics, hash.clone()));
    }
    fs::write(out.join("timing.csv"), timing.into_inner().map_err(|e| Error::Io(e.into_error()))?)?;
    let summary = aggregate(&metrics)?;
    write_aggregate(out, &summary)?;
    Ok(summary)
}
