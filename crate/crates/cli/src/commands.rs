use std::path::{Path, PathBuf};
use std::time::Instant;

use resprune::data::{Purpose, Task};
use resprune::evalbench::{
    bench_latency, eval_batch, evaluate, evaluate_model, run_ablation_matrix, EvalContext,
    EvalReference, EvalReport, LatencyStats,
};
use resprune::importance::{importance_report, score_blocks, ImportanceReport, ImportanceTable};
use resprune::manifest::{assemble, PrunedModelManifest};
use resprune::sandwich::{resume_prune, selection_order, transplant_components, Ordering};
use resprune::store::{
    load_report, manifest_from_checkpoint, manifest_to_checkpoint, save_report,
    teacher_from_checkpoint, teacher_to_checkpoint, Checkpoint, Report, RunConfig,
};
use resprune::toymodel::{build_teacher, train_teacher, TeacherTrainReport, ToyModel};
use resprune::{brll, Error, Result};
use serde::{Deserialize, Serialize};

use crate::render;
use crate::{Cli, Command, OnOff, PruneArgs};

pub const KIND_TEACHER_TRAIN: &str = "teacher-train";
pub const KIND_IMPORTANCE: &str = "importance";
pub const KIND_PRUNE: &str = "prune";
pub const KIND_EVAL: &str = "eval";
pub const KIND_BENCH: &str = "bench";
pub const KIND_ABLATION: &str = "ablation";

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScoreBody {
    pub table: ImportanceTable,
    pub report: ImportanceReport,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PruneBody {
    pub manifest: String,
    pub label: String,
    pub ratio: f64,
    pub selection: Vec<usize>,
    pub flops_ratio: f64,
    pub params_ratio: f64,
    pub seconds: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BenchBody {
    pub model: String,
    pub flops_ratio: f64,
    pub latency: LatencyStats,
}

/// Where every artifact of one data directory lives.
struct Layout {
    root: PathBuf,
}

impl Layout {
    fn teacher_init(&self) -> PathBuf {
        self.root.join("teacher-init")
    }
    fn teacher(&self) -> PathBuf {
        self.root.join("teacher")
    }
    fn importance(&self) -> PathBuf {
        self.root.join("reports").join("importance.json")
    }
    fn report(&self, name: &str) -> PathBuf {
        self.root.join("reports").join(format!("{name}.json"))
    }
    fn table(&self, name: &str) -> PathBuf {
        self.root.join("reports").join(format!("{name}.tsv"))
    }
    /// A bare name resolves under `manifests/`; anything with a separator is
    /// taken as a path stem.
    fn manifest(&self, name: &str) -> PathBuf {
        if name.contains(std::path::MAIN_SEPARATOR) || name.contains('/') {
            PathBuf::from(name)
        } else {
            self.root.join("manifests").join(name)
        }
    }
}

fn stem_name(stem: &Path) -> String {
    stem.file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default()
}

struct Env {
    cfg: RunConfig,
    digest: String,
    layout: Layout,
}

impl Env {
    fn task(&self, teacher: &ToyModel) -> Result<Task> {
        Task::new(
            self.cfg.task.clone(),
            teacher.config.n_tokens,
            teacher.config.d_model,
        )
    }

    fn load_teacher(&self) -> Result<ToyModel> {
        let t = teacher_from_checkpoint(&Checkpoint::load(&self.layout.teacher())?)?;
        if t.config != self.cfg.model {
            return Err(Error::Config(
                "the stored teacher was built from a different [model] section".into(),
            ));
        }
        Ok(t)
    }

    fn load_manifest(&self, name: &str) -> Result<PrunedModelManifest> {
        manifest_from_checkpoint(&Checkpoint::load(&self.layout.manifest(name))?)
    }

    fn save_manifest(&self, stem: &Path, m: &PrunedModelManifest) -> Result<()> {
        manifest_to_checkpoint(m)?.save(stem)
    }

    fn load_table(&self) -> Result<ImportanceTable> {
        let r: Report<ScoreBody> = load_report(&self.layout.importance(), Some(KIND_IMPORTANCE))?;
        let imp = &self.cfg.importance;
        if r.body.table.alpha == imp.alpha && r.body.table.beta == imp.beta {
            Ok(r.body.table)
        } else {
            r.body.table.reweighted(imp.alpha, imp.beta)
        }
    }

    fn report<T: Serialize>(&self, kind: &str, name: &str, body: T) -> Result<PathBuf> {
        let path = self.layout.report(name);
        save_report(&path, &Report::new(kind, self.digest.clone(), body))?;
        Ok(path)
    }
}

fn apply_prune_flags(cfg: &mut RunConfig, a: &PruneArgs) {
    if let Some(r) = a.ratio {
        cfg.prune.ratio = r;
    }
    if let Some(o) = a.order {
        cfg.pipeline.ordering = o.into();
    }
    if let Some(s) = a.st {
        cfg.pipeline.st = matches!(s, OnOff::On);
    }
    if let Some(r) = a.replacement {
        cfg.pipeline.replacement = r.into();
    }
    if let Some(w) = &a.width {
        cfg.pipeline.width = w.parse().expect("validated by clap");
    }
    if let Some(s) = a.seed {
        cfg.pipeline.seed = s;
    }
}

fn effective_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    match &cli.command {
        Command::TeacherTrain { steps: Some(s) } => cfg.teacher.steps = *s,
        Command::Score { alpha, beta } => {
            if let Some(a) = alpha {
                cfg.importance.alpha = *a;
            }
            if let Some(b) = beta {
                cfg.importance.beta = *b;
            }
        }
        Command::Prune(a) => apply_prune_flags(&mut cfg, a),
        Command::Bench { runs: Some(r), .. } => cfg.bench.runs = *r,
        Command::Ablate { seeds: Some(s) } => cfg.ablation.seeds = s.clone(),
        _ => {}
    }
    if let Some(d) = &cli.data_dir {
        cfg.paths.data_dir = Some(d.clone());
    }
    cfg.validate()?;
    cfg.ablation.validate()?;
    Ok(cfg)
}

pub fn run(cli: Cli) -> Result<()> {
    let cfg = effective_config(&cli)?;
    let env = Env {
        digest: cfg.digest(),
        layout: Layout {
            root: cfg.paths.resolve(None),
        },
        cfg,
    };
    match cli.command {
        Command::TeacherInit => teacher_init(&env),
        Command::TeacherTrain { .. } => teacher_train(&env),
        Command::Score { .. } => score(&env),
        Command::Prune(a) => prune(&env, a.out.as_deref(), a.resume),
        Command::Transplant {
            from_high,
            low,
            out,
        } => transplant(&env, &from_high, &low, out.as_deref()),
        Command::Eval { manifest, no_bench } => eval(&env, manifest.as_deref(), !no_bench),
        Command::Bench { manifest, .. } => bench(&env, manifest.as_deref()),
        Command::Ablate { .. } => ablate(&env),
        Command::Report { path } => {
            print!("{}", render::render_file(&path)?);
            Ok(())
        }
        Command::ShowConfig => {
            println!("# digest {}", env.digest);
            print!("{}", env.cfg.to_toml());
            Ok(())
        }
    }
}

fn teacher_init(env: &Env) -> Result<()> {
    let t = build_teacher(&env.cfg.model)?;
    teacher_to_checkpoint(&t, &env.digest)?.save(&env.layout.teacher_init())?;
    println!(
        "initialized teacher: {} blocks, {} parameters -> {}",
        t.n_blocks(),
        t.param_count(),
        env.layout.teacher_init().display()
    );
    Ok(())
}

fn teacher_train(env: &Env) -> Result<()> {
    let mut t = teacher_from_checkpoint(&Checkpoint::load(&env.layout.teacher_init())?)?;
    if t.config != env.cfg.model {
        return Err(Error::Config(
            "teacher-init was built from a different [model] section".into(),
        ));
    }
    let task = env.task(&t)?;
    let start = Instant::now();
    let rep: TeacherTrainReport = train_teacher(&mut t, &task, &env.cfg.teacher)?;
    teacher_to_checkpoint(&t, &env.digest)?.save(&env.layout.teacher())?;
    let path = env.report(KIND_TEACHER_TRAIN, KIND_TEACHER_TRAIN, &rep)?;
    println!(
        "trained teacher in {:.1}s: task MSE {:.5} -> {:.5}; report {}",
        start.elapsed().as_secs_f64(),
        rep.initial_mse,
        rep.final_mse,
        path.display()
    );
    Ok(())
}

fn score(env: &Env) -> Result<()> {
    let t = env.load_teacher()?;
    let task = env.task(&t)?;
    let batch = task.draw(Purpose::Score, 0, 0, env.cfg.importance.samples);
    let table = score_blocks(
        &t,
        &batch,
        env.cfg.importance.alpha,
        env.cfg.importance.beta,
    )?;
    let report = importance_report(&table);
    let path = env.layout.importance();
    save_report(
        &path,
        &Report::new(
            KIND_IMPORTANCE,
            env.digest.clone(),
            ScoreBody {
                table: table.clone(),
                report,
            },
        ),
    )?;
    println!("least important first: {:?}", table.order);
    println!("report {}", path.display());
    Ok(())
}

fn default_manifest_name(cfg: &RunConfig) -> String {
    format!(
        "{}-r{:.2}",
        cfg.pipeline.label().replace('/', "-"),
        cfg.prune.ratio
    )
}

fn partial_stem(stem: &Path) -> PathBuf {
    let mut s = stem.as_os_str().to_owned();
    s.push(".partial");
    PathBuf::from(s)
}

fn prune(env: &Env, out: Option<&str>, resume: bool) -> Result<()> {
    let t = env.load_teacher()?;
    let task = env.task(&t)?;
    let cfg = &env.cfg.pipeline;
    let table = match cfg.ordering {
        Ordering::Importance => Some(env.load_table()?),
        _ => None,
    };
    let n = t.n_blocks();
    let target = brll::blocks_for_ratio(env.cfg.prune.ratio, n)?;
    let order = selection_order(cfg.ordering, table.as_ref(), n)?;
    let name = out
        .map(str::to_string)
        .unwrap_or_else(|| default_manifest_name(&env.cfg));
    let stem = env.layout.manifest(&name);
    let partial = partial_stem(&stem);
    let mut start = PrunedModelManifest::empty(&t, cfg.label(), 0.0);
    if resume && Checkpoint::paths(&partial).0.exists() {
        start = manifest_from_checkpoint(&Checkpoint::load(&partial)?)?;
        if start.config_digest != env.digest {
            return Err(Error::Config(
                "partial manifest was produced by a different configuration".into(),
            ));
        }
        log::info!("resuming after {} completed stages", start.selection.len());
    }
    start.config_digest = env.digest.clone();
    let clock = Instant::now();
    let result = resume_prune(&t, &task, &order, start, target, cfg, |m| {
        log::info!(
            "stage {} done (block {:?})",
            m.selection.len(),
            m.selection.last()
        );
        env.save_manifest(&partial, m)
    });
    let mut m = match result {
        Ok(m) => m,
        Err(Error::Stage {
            stage,
            block,
            completed,
            source,
        }) => {
            env.save_manifest(&partial, &completed)?;
            eprintln!(
                "stage {stage} failed; {} completed stages saved to {} (rerun with --resume)",
                completed.selection.len(),
                partial.display()
            );
            return Err(Error::Stage {
                stage,
                block,
                completed,
                source,
            });
        }
        Err(e) => return Err(e),
    };
    m.ratio = env.cfg.prune.ratio;
    m.config_digest = env.digest.clone();
    env.save_manifest(&stem, &m)?;
    for p in [Checkpoint::paths(&partial).0, Checkpoint::paths(&partial).1] {
        let _ = std::fs::remove_file(p);
    }
    let model = assemble(&t, &m)?;
    let cost = model.count_cost_vs(&t);
    let body = PruneBody {
        manifest: stem.display().to_string(),
        label: m.label.clone(),
        ratio: m.ratio,
        selection: m.selection.clone(),
        flops_ratio: cost.flops_ratio,
        params_ratio: cost.params_ratio,
        seconds: clock.elapsed().as_secs_f64(),
    };
    env.report(KIND_PRUNE, &format!("prune-{}", stem_name(&stem)), &body)?;
    println!(
        "pruned blocks {:?} in {:.1}s; FLOPs ratio {:.4}; manifest {}",
        m.selection,
        body.seconds,
        cost.flops_ratio,
        stem.display()
    );
    Ok(())
}

fn transplant(env: &Env, high: &str, low: &str, out: Option<&str>) -> Result<()> {
    let t = env.load_teacher()?;
    let hi = env.load_manifest(high)?;
    let lo = env.load_manifest(low)?;
    let mut m = transplant_components(&lo, &hi)?;
    m.label = format!("{} <- {}", lo.label, stem_name(&env.layout.manifest(high)));
    m.config_digest = env.digest.clone();
    assemble(&t, &m)?;
    let name = out.map(str::to_string).unwrap_or_else(|| {
        format!(
            "{}-from-{}",
            stem_name(&env.layout.manifest(low)),
            stem_name(&env.layout.manifest(high))
        )
    });
    let stem = env.layout.manifest(&name);
    env.save_manifest(&stem, &m)?;
    println!(
        "transplanted {} surrogates and {} adapters -> {}",
        m.records.len(),
        m.adapters.len(),
        stem.display()
    );
    Ok(())
}

fn eval(env: &Env, manifest: Option<&str>, with_bench: bool) -> Result<()> {
    let t = env.load_teacher()?;
    let task = env.task(&t)?;
    let reference = EvalReference::new(&t, eval_batch(&task, &env.cfg.eval))?;
    let ctx = EvalContext {
        teacher: &t,
        task: &task,
        reference: &reference,
        bench: with_bench.then_some(&env.cfg.bench),
        config_digest: &env.digest,
    };
    let (rep, name): (EvalReport, String) = match manifest {
        Some(m) => {
            let name = stem_name(&env.layout.manifest(m));
            (evaluate(&ctx, &env.load_manifest(m)?, &name)?, name)
        }
        None => (
            evaluate_model(&ctx, &t, "teacher", "teacher", 0.0, vec![])?,
            "teacher".into(),
        ),
    };
    let path = env.report(KIND_EVAL, &format!("eval-{name}"), &rep)?;
    print!("{}", render::eval(&rep));
    println!("report {}", path.display());
    Ok(())
}

fn bench(env: &Env, manifest: Option<&str>) -> Result<()> {
    let t = env.load_teacher()?;
    let task = env.task(&t)?;
    let (model, name) = match manifest {
        Some(m) => (
            assemble(&t, &env.load_manifest(m)?)?,
            stem_name(&env.layout.manifest(m)),
        ),
        None => (t.clone(), "teacher".into()),
    };
    let latency = bench_latency(&model, &task, &env.cfg.bench)?;
    let body = BenchBody {
        model: name.clone(),
        flops_ratio: model.count_cost_vs(&t).flops_ratio,
        latency,
    };
    let path = env.report(KIND_BENCH, &format!("bench-{name}"), &body)?;
    print!("{}", render::bench(&body));
    println!("report {}", path.display());
    Ok(())
}

fn ablate(env: &Env) -> Result<()> {
    let t = env.load_teacher()?;
    let task = env.task(&t)?;
    let table = env.load_table()?;
    let reference = EvalReference::new(&t, eval_batch(&task, &env.cfg.eval))?;
    let ctx = EvalContext {
        teacher: &t,
        task: &task,
        reference: &reference,
        bench: Some(&env.cfg.bench),
        config_digest: &env.digest,
    };
    let m = run_ablation_matrix(
        &ctx,
        &task,
        Some(&table),
        &env.cfg.pipeline,
        &env.cfg.l1,
        &env.cfg.ablation,
    )?;
    let path = env.report(KIND_ABLATION, KIND_ABLATION, &m)?;
    for (name, text) in [
        ("ablation-summary", m.summary_tsv()),
        ("ablation-sweep", m.sweep_tsv()),
        ("ablation-tests", m.tests_tsv()),
    ] {
        let p = env.layout.table(name);
        std::fs::write(&p, text).map_err(|e| Error::Io {
            path: p.display().to_string(),
            source: e,
        })?;
    }
    print!("{}", render::ablation(&m));
    println!("report {}", path.display());
    Ok(())
}
