//! Plain-text views of stored reports.

use std::fmt::Write;
use std::path::Path;

use resprune::evalbench::{AblationMatrix, EvalReport, LatencyStats};
use resprune::store::Report;
use resprune::toymodel::TeacherTrainReport;
use resprune::{Error, Result};
use serde::de::DeserializeOwned;

use crate::commands::{
    BenchBody, PruneBody, ScoreBody, KIND_ABLATION, KIND_BENCH, KIND_EVAL, KIND_IMPORTANCE,
    KIND_PRUNE, KIND_TEACHER_TRAIN,
};

fn latency(l: &Option<LatencyStats>) -> String {
    match l {
        Some(l) => format!(
            "{:.1} us median (IQR {:.1}, {} runs of batch {})",
            l.median_us, l.iqr_us, l.runs, l.batch
        ),
        None => "not measured".into(),
    }
}

pub fn eval(r: &EvalReport) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "model        {} ({})", r.model_id, r.label);
    let _ = writeln!(
        s,
        "ratio        {:.2} ({} blocks pruned)",
        r.ratio, r.blocks_pruned
    );
    let _ = writeln!(s, "fid proxy    {:.6}", r.fid_proxy);
    let _ = writeln!(s, "clip proxy   {:.6}", r.clip_proxy);
    let _ = writeln!(s, "mse/teacher  {:.6}", r.mse_vs_teacher);
    let _ = writeln!(s, "task mse     {:.6}", r.task_mse);
    let _ = writeln!(
        s,
        "flops        {} ({:.4} of teacher)",
        r.flops, r.flops_ratio
    );
    let _ = writeln!(s, "params       {:.4} of teacher", r.params_ratio);
    let _ = writeln!(s, "latency      {}", latency(&r.latency));
    let _ = writeln!(s, "eval samples {}", r.eval_samples);
    s
}

pub fn bench(b: &BenchBody) -> String {
    format!(
        "{}: {}; FLOPs ratio {:.4}\n",
        b.model,
        latency(&Some(b.latency.clone())),
        b.flops_ratio
    )
}

fn score(b: &ScoreBody) -> String {
    let r = &b.report;
    let mut s = format!(
        "importance (alpha {}, beta {}, {} samples)\nrank block kind    score\n",
        r.alpha, r.beta, r.eval_samples
    );
    for p in &r.curve {
        let _ = writeln!(
            s,
            "{:>4} {:>5} {:<7} {:+.4}",
            p.rank,
            p.block,
            format!("{:?}", p.kind),
            p.score
        );
    }
    if r.fid_degenerate || r.clip_degenerate {
        let _ = writeln!(
            s,
            "warning: a metric had zero spread and was normalized to 0"
        );
    }
    s
}

fn prune(b: &PruneBody) -> String {
    format!(
        "{} at ratio {:.2}: blocks {:?}, FLOPs ratio {:.4}, params ratio {:.4}, {:.1}s\nmanifest {}\n",
        b.label, b.ratio, b.selection, b.flops_ratio, b.params_ratio, b.seconds, b.manifest
    )
}

fn teacher(r: &TeacherTrainReport) -> String {
    format!(
        "teacher: task MSE {:.6} -> {:.6} over {} steps\n",
        r.initial_mse,
        r.final_mse,
        r.losses.len()
    )
}

pub fn ablation(m: &AblationMatrix) -> String {
    let mut s = format!("ablation around {} ({:.0}s)\n\n", m.base, m.seconds);
    let _ = writeln!(
        s,
        "{:<34} {:>4} {:>10} {:>8} {:>8} {:>10}",
        "cell", "ok", "fid", "clip", "flops", "latency"
    );
    for c in &m.summary {
        let lat = c
            .latency_us
            .map(|v| format!("{v:.1}"))
            .unwrap_or_else(|| "-".into());
        let _ = writeln!(
            s,
            "{:<34} {:>4} {:>10.5} {:>8.5} {:>8.4} {:>10}",
            c.label,
            format!("{}/{}", c.ok, c.ok + c.failed),
            c.fid_proxy,
            c.clip_proxy,
            c.flops_ratio,
            lat
        );
    }
    let _ = writeln!(
        s,
        "\nsweep\n{:>6} {:>6} {:>8} {:>10} {:>10}",
        "ratio", "drop", "flops", "latency", "fid"
    );
    for r in &m.sweep {
        let lat = r
            .latency_us
            .map(|v| format!("{v:.1}"))
            .unwrap_or_else(|| "-".into());
        let _ = writeln!(
            s,
            "{:>6.2} {:>6} {:>8.4} {:>10} {:>10.5}",
            r.ratio, r.blocks_dropped, r.flops_ratio, lat, r.fid_proxy
        );
    }
    let _ = writeln!(s, "\nchecks");
    for t in &m.tests {
        let mark = if t.holds {
            "ok  "
        } else if t.gate {
            "FAIL"
        } else {
            "miss"
        };
        let _ = writeln!(
            s,
            "{mark} {:<28} {} {:.5} vs {} {:.5}",
            t.name, t.lhs, t.lhs_median, t.rhs, t.rhs_median
        );
    }
    s
}

fn body<T: DeserializeOwned>(text: &str, kind: &str) -> Result<T> {
    Ok(Report::<T>::from_json(text, Some(kind))?.body)
}

/// Renders any report written by this tool, dispatching on its kind.
pub fn render_file(path: &Path) -> Result<String> {
    let text = std::fs::read_to_string(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::MissingArtifact(path.display().to_string()),
        _ => Error::Io {
            path: path.display().to_string(),
            source: e,
        },
    })?;
    let head: Report<serde_json::Value> = Report::from_json(&text, None)?;
    let k = head.kind.as_str();
    match k {
        KIND_EVAL => Ok(eval(&body(&text, k)?)),
        KIND_BENCH => Ok(bench(&body(&text, k)?)),
        KIND_IMPORTANCE => Ok(score(&body(&text, k)?)),
        KIND_PRUNE => Ok(prune(&body(&text, k)?)),
        KIND_TEACHER_TRAIN => Ok(teacher(&body(&text, k)?)),
        KIND_ABLATION => Ok(ablation(&body(&text, k)?)),
        other => Err(Error::Parse(format!("unknown report kind {other:?}"))),
    }
}
