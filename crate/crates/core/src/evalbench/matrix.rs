//! One-factor-at-a-time ablation matrix around a base configuration, plus
//! the ratio sweep, the magnitude-pruning comparator and the component
//! transplant.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::baselines::{baseline_l1, l1_flops_budget, L1Config};
use super::{bench_interleaved, evaluate_model, EvalContext, EvalReport};
use crate::brll::blocks_for_ratio;
use crate::data::{mix_seeds, Task};
use crate::error::{Error, Result};
use crate::importance::{median, ImportanceTable};
use crate::manifest::{assemble, PrunedModelManifest};
use crate::sandwich::{
    progressive_prune, progressive_sweep, transplant_components, Ordering, PipelineConfig,
    ReplacementKind,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblationMatrixConfig {
    /// Ratio of the ablation cells.
    pub ratio: f64,
    /// Ratios of the sweep; run once per seed with the base settings.
    pub ratios: Vec<f64>,
    pub seeds: Vec<u64>,
    pub orderings: Vec<Ordering>,
    pub st: Vec<bool>,
    pub replacements: Vec<ReplacementKind>,
    pub widths: Vec<usize>,
    /// Add the magnitude-pruning comparator at `ratio`.
    pub l1: bool,
    /// Source ratio of the transplant into `ratio`; `None` skips it.
    pub transplant_from: Option<f64>,
}

impl Default for AblationMatrixConfig {
    fn default() -> Self {
        Self {
            ratio: 0.10,
            ratios: vec![0.05, 0.10, 0.15, 0.20, 0.25, 0.30],
            seeds: vec![0, 1, 2, 3, 4],
            orderings: vec![
                Ordering::Importance,
                Ordering::Start2end,
                Ordering::End2start,
            ],
            st: vec![true, false],
            replacements: vec![ReplacementKind::Linear, ReplacementKind::Delete],
            widths: vec![1, 3, 5],
            l1: true,
            transplant_from: Some(0.20),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "cell", rename_all = "snake_case")]
pub enum Cell {
    Pipeline {
        ordering: Ordering,
        st: bool,
        replacement: ReplacementKind,
        width: usize,
        ratio: f64,
    },
    L1 {
        ratio: f64,
    },
    Transplant {
        low: f64,
        high: f64,
    },
}

impl Cell {
    pub fn label(&self) -> String {
        match self {
            Cell::Pipeline {
                ordering,
                st,
                replacement,
                width,
                ratio,
            } => format!(
                "{}/{}/{}/w{}@{:.2}",
                ordering.as_str(),
                if *st { "st" } else { "no-st" },
                replacement.as_str(),
                width,
                ratio
            ),
            Cell::L1 { ratio } => format!("l1/ft@{ratio:.2}"),
            Cell::Transplant { low, high } => format!("transplant@{low:.2}<-{high:.2}"),
        }
    }

    fn pipeline(&self, base: &PipelineConfig, seed: u64) -> Option<(PipelineConfig, f64)> {
        match *self {
            Cell::Pipeline {
                ordering,
                st,
                replacement,
                width,
                ratio,
            } => Some((
                PipelineConfig {
                    ordering,
                    st,
                    replacement,
                    width,
                    seed,
                    ..base.clone()
                },
                ratio,
            )),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellResult {
    pub cell: Cell,
    pub label: String,
    pub seed: u64,
    pub report: Option<EvalReport>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellSummary {
    pub label: String,
    pub ok: usize,
    pub failed: usize,
    pub fid_proxy: f64,
    pub clip_proxy: f64,
    pub mse_vs_teacher: f64,
    pub flops_ratio: f64,
    pub latency_us: Option<f64>,
}

/// `lhs ≤ rhs` on medians. Tests with `gate == false` are reported only.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DirectionTest {
    pub name: String,
    pub lhs: String,
    pub rhs: String,
    pub lhs_median: f64,
    pub rhs_median: f64,
    pub holds: bool,
    pub gate: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub ratio: f64,
    pub blocks_dropped: usize,
    pub flops_ratio: f64,
    pub latency_us: Option<f64>,
    pub fid_proxy: f64,
    pub clip_proxy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransplantRow {
    pub seed: u64,
    pub native_fid: f64,
    pub hybrid_fid: f64,
    /// `hybrid − native`; negative means the transplant helped.
    pub delta: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationMatrix {
    pub base: String,
    pub teacher: EvalReport,
    pub results: Vec<CellResult>,
    pub summary: Vec<CellSummary>,
    pub sweep: Vec<SweepRow>,
    pub transplant: Vec<TransplantRow>,
    pub tests: Vec<DirectionTest>,
    pub seconds: f64,
}

fn approx_eq(a: f64, b: f64) -> bool {
    (a - b).abs() < 1e-9
}

impl AblationMatrixConfig {
    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::Config("ablation.seeds is empty".into()));
        }
        if self.widths.iter().any(|w| ![1, 3, 5].contains(w)) {
            return Err(Error::Config(
                "ablation.widths must be drawn from 1, 3, 5".into(),
            ));
        }
        let all = self
            .ratios
            .iter()
            .chain([&self.ratio])
            .chain(self.transplant_from.as_ref());
        for r in all {
            if !(0.0..=1.0).contains(r) {
                return Err(Error::Config(format!("ablation ratio {r} outside [0, 1]")));
            }
        }
        if matches!(self.transplant_from, Some(h) if h < self.ratio) {
            return Err(Error::Config(
                "ablation.transplant_from must be >= ablation.ratio".into(),
            ));
        }
        Ok(())
    }

    fn base_cell(&self, base: &PipelineConfig) -> Cell {
        Cell::Pipeline {
            ordering: base.ordering,
            st: base.st,
            replacement: base.replacement,
            width: base.width,
            ratio: self.ratio,
        }
    }

    /// The base cell followed by every single-axis variation of it.
    pub fn cells(&self, base: &PipelineConfig) -> Vec<Cell> {
        let b = self.base_cell(base);
        let mut out = vec![b.clone()];
        let mut push = |c: Cell| {
            if !out.contains(&c) {
                out.push(c);
            }
        };
        let Cell::Pipeline {
            ordering,
            st,
            replacement,
            width,
            ratio,
        } = b
        else {
            unreachable!()
        };
        for &o in &self.orderings {
            push(Cell::Pipeline {
                ordering: o,
                st,
                replacement,
                width,
                ratio,
            });
        }
        for &s in &self.st {
            push(Cell::Pipeline {
                ordering,
                st: s,
                replacement,
                width,
                ratio,
            });
        }
        for &r in &self.replacements {
            push(Cell::Pipeline {
                ordering,
                st,
                replacement: r,
                width,
                ratio,
            });
        }
        for &w in &self.widths {
            push(Cell::Pipeline {
                ordering,
                st,
                replacement,
                width: w,
                ratio,
            });
        }
        for &r in &self.ratios {
            push(Cell::Pipeline {
                ordering,
                st,
                replacement,
                width,
                ratio: r,
            });
        }
        if self.l1 {
            push(Cell::L1 { ratio });
        }
        if let Some(high) = self.transplant_from {
            push(Cell::Transplant { low: ratio, high });
        }
        out
    }
}

/// Ratios at which the base pipeline is snapshotted, ascending.
fn snapshot_ratios(cfg: &AblationMatrixConfig) -> Vec<f64> {
    let mut r: Vec<f64> = cfg
        .ratios
        .iter()
        .copied()
        .chain([cfg.ratio])
        .chain(cfg.transplant_from)
        .collect();
    r.sort_by(f64::total_cmp);
    r.dedup_by(|a, b| approx_eq(*a, *b));
    r
}

struct SeedRun<'a> {
    ctx: &'a EvalContext<'a>,
    task: &'a Task,
    table: Option<&'a ImportanceTable>,
    base: &'a PipelineConfig,
    l1: &'a L1Config,
    cfg: &'a AblationMatrixConfig,
    seed: u64,
    snapshots: Vec<(f64, PrunedModelManifest)>,
}

impl SeedRun<'_> {
    fn snapshot(&self, ratio: f64) -> Option<&PrunedModelManifest> {
        self.snapshots
            .iter()
            .find(|(r, _)| approx_eq(*r, ratio))
            .map(|(_, m)| m)
    }

    fn manifest(&self, cell: &Cell) -> Result<PrunedModelManifest> {
        let base_cell = self.cfg.base_cell(self.base);
        match cell {
            Cell::Pipeline { ratio, .. } => {
                let on_base_axis = match (cell, &base_cell) {
                    (
                        Cell::Pipeline {
                            ordering: o1,
                            st: s1,
                            replacement: r1,
                            width: w1,
                            ..
                        },
                        Cell::Pipeline {
                            ordering: o2,
                            st: s2,
                            replacement: r2,
                            width: w2,
                            ..
                        },
                    ) => (o1, s1, r1, w1) == (o2, s2, r2, w2),
                    _ => false,
                };
                if on_base_axis {
                    if let Some(m) = self.snapshot(*ratio) {
                        return Ok(m.clone());
                    }
                }
                let (pc, r) = cell.pipeline(self.base, self.seed).expect("pipeline cell");
                progressive_prune(self.ctx.teacher, self.task, self.table, r, &pc)
            }
            Cell::L1 { ratio } => {
                let native = self
                    .snapshot(*ratio)
                    .ok_or_else(|| Error::State("missing base snapshot".into()))?;
                let budget = l1_flops_budget(self.ctx.teacher, &native.pruned_blocks())?;
                let cfg = L1Config {
                    seed: mix_seeds(&[self.l1.seed, self.seed]),
                    ..self.l1.clone()
                };
                baseline_l1(self.ctx.teacher, self.task, budget, *ratio, &cfg)
            }
            Cell::Transplant { low, high } => {
                let lo = self
                    .snapshot(*low)
                    .ok_or_else(|| Error::State("missing low snapshot".into()))?;
                let hi = self
                    .snapshot(*high)
                    .ok_or_else(|| Error::State("missing high snapshot".into()))?;
                let mut m = transplant_components(lo, hi)?;
                m.label = format!("transplant({high:.2})");
                Ok(m)
            }
        }
    }
}

/// Runs every cell for every seed. The teacher stays fixed; seeds vary the
/// pipeline's sample streams, adapter initialization and minibatch order.
/// A failing cell is recorded and the matrix continues.
pub fn run_ablation_matrix(
    ctx: &EvalContext<'_>,
    task: &Task,
    table: Option<&ImportanceTable>,
    base: &PipelineConfig,
    l1: &L1Config,
    cfg: &AblationMatrixConfig,
) -> Result<AblationMatrix> {
    cfg.validate()?;
    let start = std::time::Instant::now();
    let cells = cfg.cells(base);
    let base_label = cfg.base_cell(base).label();
    let quiet = EvalContext {
        bench: None,
        ..*ctx
    };
    let mut teacher = evaluate_model(
        &quiet,
        ctx.teacher,
        "teacher",
        "teacher",
        0.0,
        cfg.seeds.clone(),
    )?;
    let mut teacher_latency = Vec::new();
    let mut results = Vec::new();
    for &seed in &cfg.seeds {
        let pc = PipelineConfig {
            seed,
            ..base.clone()
        };
        let ratios = snapshot_ratios(cfg);
        let snapshots = match progressive_sweep(ctx.teacher, task, table, &ratios, &pc) {
            Ok(s) => ratios.into_iter().zip(s).collect(),
            Err(e) => {
                log::warn!("seed {seed}: base sweep failed: {e}");
                Vec::new()
            }
        };
        let run = SeedRun {
            ctx,
            task,
            table,
            base,
            l1,
            cfg,
            seed,
            snapshots,
        };
        let mut models = Vec::new();
        for cell in &cells {
            let label = cell.label();
            let outcome = run.manifest(cell).and_then(|m| {
                let model = assemble(ctx.teacher, &m)?;
                let id = format!("{label}#{seed}");
                let r = evaluate_model(&quiet, &model, &id, &m.label, m.ratio, vec![m.log.seed])?;
                models.push((results.len(), model));
                Ok(r)
            });
            log::info!(
                "seed {seed} {label}: {}",
                match &outcome {
                    Ok(r) => format!("fid {:.5}", r.fid_proxy),
                    Err(e) => format!("failed: {e}"),
                }
            );
            let (report, error) = match outcome {
                Ok(r) => (Some(r), None),
                Err(e) => (None, Some(e.to_string())),
            };
            results.push(CellResult {
                cell: cell.clone(),
                label,
                seed,
                report,
                error,
            });
        }
        if let Some(bench) = ctx.bench {
            let mut all = vec![ctx.teacher];
            all.extend(models.iter().map(|(_, m)| m));
            let mut stats = bench_interleaved(&all, task, bench)?.into_iter();
            teacher_latency.extend(stats.next());
            for ((i, _), l) in models.iter().zip(stats) {
                if let Some(r) = results[*i].report.as_mut() {
                    r.latency = Some(l);
                }
            }
        }
    }
    // The seed group whose teacher median is the median across seeds.
    teacher_latency.sort_by(|a, b| a.median_us.total_cmp(&b.median_us));
    teacher.latency = teacher_latency.get(teacher_latency.len() / 2).cloned();
    let summary = summarize(&cells, &results);
    let sweep = sweep_rows(cfg, base, &teacher, &summary, &results);
    let transplant = transplant_rows(cfg, base, &results);
    let tests = direction_tests(cfg, base, &summary, &sweep, &transplant);
    Ok(AblationMatrix {
        base: base_label,
        teacher,
        results,
        summary,
        sweep,
        transplant,
        tests,
        seconds: start.elapsed().as_secs_f64(),
    })
}

fn summarize(cells: &[Cell], results: &[CellResult]) -> Vec<CellSummary> {
    cells
        .iter()
        .map(|c| {
            let label = c.label();
            let reps: Vec<&EvalReport> = results
                .iter()
                .filter(|r| r.label == label)
                .filter_map(|r| r.report.as_ref())
                .collect();
            let failed = results
                .iter()
                .filter(|r| r.label == label && r.report.is_none())
                .count();
            let med =
                |f: fn(&EvalReport) -> f64| median(&reps.iter().map(|r| f(r)).collect::<Vec<_>>());
            let lat: Vec<f64> = reps
                .iter()
                .filter_map(|r| r.latency.as_ref().map(|l| l.median_us))
                .collect();
            CellSummary {
                label,
                ok: reps.len(),
                failed,
                fid_proxy: med(|r| r.fid_proxy),
                clip_proxy: med(|r| r.clip_proxy),
                mse_vs_teacher: med(|r| r.mse_vs_teacher),
                flops_ratio: med(|r| r.flops_ratio),
                latency_us: (!lat.is_empty()).then(|| median(&lat)),
            }
        })
        .collect()
}

fn find<'a>(summary: &'a [CellSummary], label: &str) -> Option<&'a CellSummary> {
    summary.iter().find(|s| s.label == label && s.ok > 0)
}

fn sweep_rows(
    cfg: &AblationMatrixConfig,
    base: &PipelineConfig,
    teacher: &EvalReport,
    summary: &[CellSummary],
    results: &[CellResult],
) -> Vec<SweepRow> {
    let mut rows = vec![SweepRow {
        ratio: 0.0,
        blocks_dropped: 0,
        flops_ratio: 1.0,
        latency_us: teacher.latency.as_ref().map(|l| l.median_us),
        fid_proxy: teacher.fid_proxy,
        clip_proxy: teacher.clip_proxy,
    }];
    for &ratio in &cfg.ratios {
        let label = Cell::Pipeline {
            ordering: base.ordering,
            st: base.st,
            replacement: base.replacement,
            width: base.width,
            ratio,
        }
        .label();
        let dropped = results
            .iter()
            .filter(|r| r.label == label)
            .find_map(|r| r.report.as_ref().map(|e| e.blocks_pruned))
            .unwrap_or(0);
        if let Some(s) = find(summary, &label) {
            rows.push(SweepRow {
                ratio,
                blocks_dropped: dropped,
                flops_ratio: s.flops_ratio,
                latency_us: s.latency_us,
                fid_proxy: s.fid_proxy,
                clip_proxy: s.clip_proxy,
            });
        }
    }
    rows
}

fn transplant_rows(
    cfg: &AblationMatrixConfig,
    base: &PipelineConfig,
    results: &[CellResult],
) -> Vec<TransplantRow> {
    let Some(high) = cfg.transplant_from else {
        return Vec::new();
    };
    let native = cfg.base_cell(base).label();
    let hybrid = Cell::Transplant {
        low: cfg.ratio,
        high,
    }
    .label();
    let fid = |label: &str, seed: u64| {
        results
            .iter()
            .find(|r| r.label == label && r.seed == seed)
            .and_then(|r| r.report.as_ref())
            .map(|r| r.fid_proxy)
    };
    cfg.seeds
        .iter()
        .filter_map(|&seed| {
            let (n, h) = (fid(&native, seed)?, fid(&hybrid, seed)?);
            Some(TransplantRow {
                seed,
                native_fid: n,
                hybrid_fid: h,
                delta: h - n,
            })
        })
        .collect()
}

fn direction_tests(
    cfg: &AblationMatrixConfig,
    base: &PipelineConfig,
    summary: &[CellSummary],
    sweep: &[SweepRow],
    transplant: &[TransplantRow],
) -> Vec<DirectionTest> {
    let mut tests = Vec::new();
    let vary = |f: &dyn Fn(&mut Cell)| {
        let mut c = cfg.base_cell(base);
        f(&mut c);
        c.label()
    };
    let mut pair = |name: &str, lhs: String, rhs: String, gate: bool| {
        if let (Some(l), Some(r)) = (find(summary, &lhs), find(summary, &rhs)) {
            tests.push(DirectionTest {
                name: name.into(),
                holds: l.fid_proxy <= r.fid_proxy,
                lhs,
                rhs,
                lhs_median: l.fid_proxy,
                rhs_median: r.fid_proxy,
                gate,
            });
        }
    };
    let with_ordering = |o: Ordering| {
        vary(&|c| {
            if let Cell::Pipeline { ordering, .. } = c {
                *ordering = o;
            }
        })
    };
    pair(
        "ordering: importance <= end2start",
        with_ordering(Ordering::Importance),
        with_ordering(Ordering::End2start),
        true,
    );
    pair(
        "ordering: end2start <= start2end",
        with_ordering(Ordering::End2start),
        with_ordering(Ordering::Start2end),
        true,
    );
    let with_st = |s: bool| {
        vary(&|c| {
            if let Cell::Pipeline { st, .. } = c {
                *st = s;
            }
        })
    };
    pair("st: on <= off", with_st(true), with_st(false), true);
    let with_rep = |k: ReplacementKind| {
        vary(&|c| {
            if let Cell::Pipeline { replacement, .. } = c {
                *replacement = k;
            }
        })
    };
    pair(
        "replacement: linear <= delete",
        with_rep(ReplacementKind::Linear),
        with_rep(ReplacementKind::Delete),
        true,
    );
    let with_width = |w: usize| {
        vary(&|c| {
            if let Cell::Pipeline { width, .. } = c {
                *width = w;
            }
        })
    };
    pair("width: 3 <= 1", with_width(3), with_width(1), true);
    pair("width: 5 <= 3", with_width(5), with_width(3), false);
    if cfg.l1 {
        pair(
            "flops-matched: pipeline <= l1",
            cfg.base_cell(base).label(),
            Cell::L1 { ratio: cfg.ratio }.label(),
            true,
        );
    }
    let pruned: Vec<&SweepRow> = sweep.iter().filter(|r| r.ratio > 0.0).collect();
    if pruned.len() >= 2 {
        let steps =
            |f: &dyn Fn(&SweepRow, &SweepRow) -> bool| pruned.windows(2).all(|w| f(w[0], w[1]));
        let first = pruned[0];
        let last = pruned[pruned.len() - 1];
        tests.push(DirectionTest {
            name: "sweep: flops strictly decrease".into(),
            lhs: format!("{:.2}", last.ratio),
            rhs: format!("{:.2}", first.ratio),
            lhs_median: last.flops_ratio,
            rhs_median: first.flops_ratio,
            holds: steps(&|a, b| b.flops_ratio < a.flops_ratio),
            gate: true,
        });
        if pruned.iter().all(|r| r.latency_us.is_some()) {
            tests.push(DirectionTest {
                name: "sweep: latency strictly decreases".into(),
                lhs: format!("{:.2}", last.ratio),
                rhs: format!("{:.2}", first.ratio),
                lhs_median: last.latency_us.unwrap_or(f64::NAN),
                rhs_median: first.latency_us.unwrap_or(f64::NAN),
                holds: steps(&|a, b| b.latency_us < a.latency_us),
                gate: true,
            });
        }
        tests.push(DirectionTest {
            name: "sweep: fid proxy non-decreasing".into(),
            lhs: format!("{:.2}", first.ratio),
            rhs: format!("{:.2}", last.ratio),
            lhs_median: first.fid_proxy,
            rhs_median: last.fid_proxy,
            holds: steps(&|a, b| a.fid_proxy <= b.fid_proxy),
            gate: true,
        });
    }
    if !transplant.is_empty() {
        let h = median(&transplant.iter().map(|t| t.hybrid_fid).collect::<Vec<_>>());
        let n = median(&transplant.iter().map(|t| t.native_fid).collect::<Vec<_>>());
        tests.push(DirectionTest {
            name: "transplant: hybrid <= native".into(),
            lhs: "hybrid".into(),
            rhs: "native".into(),
            lhs_median: h,
            rhs_median: n,
            holds: h <= n,
            gate: false,
        });
    }
    tests
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.1}")).unwrap_or_else(|| "-".into())
}

impl AblationMatrix {
    /// Tab-separated medians, one line per cell.
    pub fn summary_tsv(&self) -> String {
        let mut s = String::from(
            "cell\tok\tfailed\tfid_proxy\tclip_proxy\tmse_vs_teacher\tflops_ratio\tlatency_us\n",
        );
        for c in &self.summary {
            let _ = writeln!(
                s,
                "{}\t{}\t{}\t{:.6e}\t{:.6}\t{:.6e}\t{:.4}\t{}",
                c.label,
                c.ok,
                c.failed,
                c.fid_proxy,
                c.clip_proxy,
                c.mse_vs_teacher,
                c.flops_ratio,
                opt(c.latency_us)
            );
        }
        s
    }

    /// Ratio, blocks dropped, FLOPs ratio, latency and quality proxies.
    pub fn sweep_tsv(&self) -> String {
        let mut s =
            String::from("ratio\tblocks_dropped\tflops_ratio\tlatency_us\tfid_proxy\tclip_proxy\n");
        for r in &self.sweep {
            let _ = writeln!(
                s,
                "{:.2}\t{}\t{:.4}\t{}\t{:.6e}\t{:.6}",
                r.ratio,
                r.blocks_dropped,
                r.flops_ratio,
                opt(r.latency_us),
                r.fid_proxy,
                r.clip_proxy
            );
        }
        s
    }

    pub fn tests_tsv(&self) -> String {
        let mut s = String::from("test\tlhs\trhs\tlhs_median\trhs_median\tholds\tgate\n");
        for t in &self.tests {
            let _ = writeln!(
                s,
                "{}\t{}\t{}\t{:.6e}\t{:.6e}\t{}\t{}",
                t.name, t.lhs, t.rhs, t.lhs_median, t.rhs_median, t.holds, t.gate
            );
        }
        s
    }
}

/// Blocks the sweep drops at each ratio on an `n`-block model.
pub fn sweep_block_counts(ratios: &[f64], n: usize) -> Result<Vec<usize>> {
    ratios.iter().map(|&r| blocks_for_ratio(r, n)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cells_vary_one_axis_at_a_time() {
        let cfg = AblationMatrixConfig::default();
        let cells = cfg.cells(&PipelineConfig::default());
        let labels: Vec<String> = cells.iter().map(Cell::label).collect();
        assert_eq!(labels[0], "importance/st/linear/w3@0.10");
        for l in [
            "start2end/st/linear/w3@0.10",
            "end2start/st/linear/w3@0.10",
            "importance/no-st/linear/w3@0.10",
            "importance/st/delete/w3@0.10",
            "importance/st/linear/w1@0.10",
            "importance/st/linear/w5@0.10",
            "importance/st/linear/w3@0.30",
            "l1/ft@0.10",
            "transplant@0.10<-0.20",
        ] {
            assert!(labels.iter().any(|x| x == l), "{l} missing");
        }
        let mut dedup = labels.clone();
        dedup.sort();
        dedup.dedup();
        assert_eq!(dedup.len(), labels.len());
        // base + 2 orderings + st off + delete + 2 widths + 5 other ratios + l1 + transplant
        assert_eq!(labels.len(), 1 + 2 + 1 + 1 + 2 + 5 + 1 + 1);
    }

    #[test]
    fn snapshot_ratios_are_unique_and_sorted() {
        let cfg = AblationMatrixConfig::default();
        let r = snapshot_ratios(&cfg);
        assert_eq!(r, vec![0.05, 0.10, 0.15, 0.20, 0.25, 0.30]);
    }

    #[test]
    fn sweep_counts_on_default_model() {
        let counts = sweep_block_counts(&AblationMatrixConfig::default().ratios, 24).unwrap();
        assert_eq!(counts, vec![1, 2, 3, 4, 6, 7]);
    }

    #[test]
    fn invalid_width_is_rejected() {
        let cfg = AblationMatrixConfig {
            widths: vec![2],
            ..AblationMatrixConfig::default()
        };
        assert!(cfg.validate().is_err());
    }
}
