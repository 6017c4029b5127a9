//! Trained teachers cached under the cargo target directory, keyed by the
//! model, task and training sections, so each configuration trains once.

use std::path::PathBuf;
use std::sync::Mutex;

use resprune::data::{Task, TaskConfig};
use resprune::store::{
    sha256_hex, teacher_from_checkpoint, teacher_to_checkpoint, Checkpoint, TOOL_VERSION,
};
use resprune::toymodel::{
    build_teacher, train_teacher, ModelConfig, TeacherTrainConfig, TeacherTrainReport, ToyModel,
};

static LOCK: Mutex<()> = Mutex::new(());

pub struct Trained {
    pub teacher: ToyModel,
    pub task: Task,
    pub report: TeacherTrainReport,
    /// Wall time spent training; 0 when loaded from the cache.
    pub seconds: f64,
}

fn cache_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join("teachers")
}

pub fn trained_teacher(
    model: &ModelConfig,
    task: &TaskConfig,
    train: &TeacherTrainConfig,
) -> Trained {
    let _guard = LOCK.lock().unwrap_or_else(|e| e.into_inner());
    let key = sha256_hex(
        serde_json::to_string(&(TOOL_VERSION, model, task, train))
            .unwrap()
            .as_bytes(),
    );
    let stem = cache_dir().join(&key[..16]);
    let report_path = stem.with_file_name(format!("{}.report.json", &key[..16]));
    let task = Task::new(task.clone(), model.n_tokens, model.d_model).expect("valid task");
    if let (Ok(ck), Ok(text)) = (
        Checkpoint::load(&stem),
        std::fs::read_to_string(&report_path),
    ) {
        if let (Ok(teacher), Ok(report)) =
            (teacher_from_checkpoint(&ck), serde_json::from_str(&text))
        {
            return Trained {
                teacher,
                task,
                report,
                seconds: 0.0,
            };
        }
    }
    let start = std::time::Instant::now();
    let mut teacher = build_teacher(model).expect("valid model");
    let report = train_teacher(&mut teacher, &task, train).expect("teacher trains");
    let seconds = start.elapsed().as_secs_f64();
    teacher_to_checkpoint(&teacher, &key)
        .and_then(|ck| ck.save(&stem))
        .expect("cache teacher");
    std::fs::write(&report_path, serde_json::to_string(&report).unwrap()).expect("cache report");
    Trained {
        teacher,
        task,
        report,
        seconds,
    }
}
