//! Experiment pipelines behind the CLI: configuration, dataset collection,
//! training, optimization, evaluation against random baseline tools, the
//! automated wire-extraction fabrication check, and CSV/PGM outputs.

use std::fs;
use std::io::BufReader;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::dataset::{classify_changed, collect_for_tool, collect_motion, load_dataset, save_dataset, CollectConfig, EpisodeRecord};
use crate::error::{io_err, Error, Result};
use crate::imgcore::{chamfer_distance, BinaryImage, GrayImage};
use crate::optimizer::{history_csv, optimize, OptimizeConfig, OptimizeMode, OptimizeResult, TaskSpec};
use crate::sim2d::{bresenham, generate_random_tool, DiskObject, RenderSpec, SimConfig, Simulator, ToolGenConfig, ToolTrajectory};
use crate::toolnet::{build, evaluate_loss, load_checkpoint, loss_curve_csv, predict, save_checkpoint, train, ToolNetParams, TrainConfig};

/// Independent random streams per pipeline stage.
pub mod stream {
    pub const COLLECT: u64 = 1;
    pub const HELDOUT: u64 = 2;
    pub const TASKS: u64 = 3;
    pub const OPTIMIZE: u64 = 4;
    pub const EVAL: u64 = 5;
    pub const BASELINES: u64 = 6;
}

pub fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// A task given by disk positions: push the disk from `start` to `target`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TaskDef {
    pub start: [f64; 2],
    pub target: [f64; 2],
}

impl TaskDef {
    pub fn reversed(&self) -> Self {
        Self {
            start: self.target,
            target: self.start,
        }
    }

    pub fn spec(&self, sim: &Simulator) -> TaskSpec {
        TaskSpec::new(sim.render_task(&sim.disk(self.start)), sim.render_task(&sim.disk(self.target)))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub repeats: usize,
    /// Standard deviation of the initial-pose jitter, in task pixels.
    pub jitter_px: f64,
    pub n_baselines: usize,
    pub fabricate_threshold: f64,
    /// Largest break (px) wire extraction bridges in a fragmented tool.
    pub wire_max_gap: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            repeats: 5,
            jitter_px: 2.0,
            n_baselines: 4,
            fabricate_threshold: 150.0,
            wire_max_gap: 4.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub out_dir: PathBuf,
    /// Shrinks the tool count and epoch count to the desk-scale values.
    pub desk_scale: bool,
    pub n_tools: usize,
    pub desk_n_tools: usize,
    pub desk_epochs: usize,
    /// Extra tools collected into a separate held-out file.
    pub heldout_tools: usize,
    pub montage_count: usize,
    /// Explicit tasks; when empty, `n_tasks` random tasks are generated.
    pub tasks: Vec<TaskDef>,
    pub n_tasks: usize,
    /// Optimize one tool for all tasks together instead of one per task.
    pub multitask: bool,
    pub sim: SimConfig,
    pub tool_gen: ToolGenConfig,
    pub collect: CollectConfig,
    pub train: TrainConfig,
    pub optimize: OptimizeConfig,
    pub eval: EvalConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            out_dir: PathBuf::from("out"),
            desk_scale: false,
            n_tools: 48,
            desk_n_tools: 12,
            desk_epochs: 30,
            heldout_tools: 1,
            montage_count: 8,
            tasks: Vec::new(),
            n_tasks: 3,
            multitask: false,
            sim: SimConfig::default(),
            tool_gen: ToolGenConfig::default(),
            collect: CollectConfig::default(),
            train: TrainConfig::default(),
            optimize: OptimizeConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn effective_n_tools(&self) -> usize {
        if self.desk_scale {
            self.desk_n_tools
        } else {
            self.n_tools
        }
    }

    pub fn effective_train(&self) -> TrainConfig {
        let mut t = self.train.clone();
        if self.desk_scale {
            t.epochs = self.desk_epochs;
        }
        t
    }

    pub fn simulator(&self) -> Result<Simulator> {
        Simulator::new(self.sim.clone())
    }

    fn path(&self, name: &str) -> PathBuf {
        self.out_dir.join(name)
    }

    pub fn dataset_path(&self) -> PathBuf {
        self.path("dataset.bin")
    }

    pub fn heldout_path(&self) -> PathBuf {
        self.path("heldout.bin")
    }

    pub fn checkpoint_path(&self) -> PathBuf {
        self.path("checkpoint.bin")
    }

    pub fn optimize_dir(&self) -> PathBuf {
        self.path("optimize")
    }

    /// Writes the resolved configuration beside the command's outputs.
    pub fn write_copy(&self, command: &str) -> Result<()> {
        ensure_dir(&self.out_dir)?;
        write_text(&self.path(&format!("config_{command}.json")), &serde_json::to_string_pretty(self)?)
    }

    /// Explicit tasks, or reproducible random ones.
    pub fn resolve_tasks(&self, sim: &Simulator) -> Result<Vec<TaskDef>> {
        if !self.tasks.is_empty() {
            return Ok(self.tasks.clone());
        }
        let mut rng = rng_for(self.seed, stream::TASKS);
        random_tasks(sim, &self.tool_gen, &self.collect, self.n_tasks, &mut rng)
    }
}

fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(io_err(dir))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(io_err(path))
}

fn write_binary_pgm(path: &Path, img: &BinaryImage) -> Result<()> {
    let mut buf = Vec::new();
    img.write_pgm(&mut buf).map_err(io_err(path))?;
    fs::write(path, buf).map_err(io_err(path))
}

fn write_gray_pgm(path: &Path, img: &GrayImage) -> Result<()> {
    let mut buf = Vec::new();
    img.write_pgm(&mut buf).map_err(io_err(path))?;
    fs::write(path, buf).map_err(io_err(path))
}

pub fn read_binary_pgm(path: &Path) -> Result<BinaryImage> {
    let f = fs::File::open(path).map_err(io_err(path))?;
    BinaryImage::read_pgm(BufReader::new(f))
}

/// Random tasks whose targets are reachable: each comes from a simulated
/// changed motion of a freshly generated tool.
pub fn random_tasks<R: Rng + ?Sized>(
    sim: &Simulator,
    tool_gen: &ToolGenConfig,
    collect: &CollectConfig,
    count: usize,
    rng: &mut R,
) -> Result<Vec<TaskDef>> {
    let mut out = Vec::with_capacity(count);
    let mut attempts = 0;
    while out.len() < count {
        attempts += 1;
        if attempts > 10_000 * count.max(1) {
            return Err(Error::Config("could not generate changed tasks".into()));
        }
        let tool = generate_random_tool(rng, sim.render_spec(), tool_gen);
        let motion = match collect_motion(sim, &tool, collect, rng) {
            Ok(m) => m,
            Err(Error::Unresolved { .. }) => continue,
            Err(e) => return Err(e),
        };
        if classify_changed(motion.first_state(), motion.last_state(), collect.d_thre)? {
            out.push(TaskDef {
                start: motion.objects[0].center,
                target: motion.objects.last().expect("frames").center,
            });
        }
    }
    Ok(out)
}

/// Per-tool summary of a collection run.
#[derive(Debug, Clone, PartialEq)]
pub struct CollectedTool {
    pub image: BinaryImage,
    pub stats: crate::dataset::CollectStats,
    /// Tools drawn before this one that exhausted the motion budget.
    pub replaced: usize,
}

/// Collects `n_tools` random tools. A tool that exhausts the motion budget
/// (it rarely touches the object) is replaced by a fresh random tool.
pub fn collect_tools<R: Rng + ?Sized>(
    sim: &Simulator,
    tool_gen: &ToolGenConfig,
    cfg: &CollectConfig,
    n_tools: usize,
    rng: &mut R,
) -> Result<(Vec<EpisodeRecord>, Vec<CollectedTool>)> {
    let mut records = Vec::with_capacity(n_tools * cfg.records_per_tool());
    let mut tools = Vec::with_capacity(n_tools);
    for index in 0..n_tools {
        let mut replaced = 0;
        loop {
            let tool = generate_random_tool(rng, sim.render_spec(), tool_gen);
            match collect_for_tool(sim, &tool, cfg, rng) {
                Ok((r, stats)) => {
                    records.extend(r);
                    tools.push(CollectedTool { image: tool, stats, replaced });
                    break;
                }
                Err(Error::MotionBudget { .. }) if replaced < 100 => replaced += 1,
                Err(e) => return Err(Error::Config(format!("tool {index}: {e}"))),
            }
        }
    }
    Ok((records, tools))
}

fn collect_summary_csv(tools: &[CollectedTool], records_per_tool: usize) -> String {
    let mut s = String::from("tool,motions,changed,unchanged,discarded,sim_failures,replaced,records\n");
    for (i, t) in tools.iter().enumerate() {
        let st = &t.stats;
        s.push_str(&format!(
            "{i},{},{},{},{},{},{},{records_per_tool}\n",
            st.motions, st.changed, st.unchanged, st.discarded, st.sim_failures, t.replaced
        ));
    }
    s
}

pub fn cmd_collect(cfg: &ExperimentConfig) -> Result<()> {
    cfg.collect.validate()?;
    cfg.write_copy("collect")?;
    let sim = cfg.simulator()?;
    let mut rng = rng_for(cfg.seed, stream::COLLECT);
    let (records, tools) = collect_tools(&sim, &cfg.tool_gen, &cfg.collect, cfg.effective_n_tools(), &mut rng)?;
    save_dataset(&records, &cfg.dataset_path())?;
    let per_tool = cfg.collect.records_per_tool();
    write_text(&cfg.path("collect_summary.csv"), &collect_summary_csv(&tools, per_tool))?;
    let tool_dir = cfg.path("tools");
    ensure_dir(&tool_dir)?;
    for (i, t) in tools.iter().enumerate() {
        write_binary_pgm(&tool_dir.join(format!("tool_{i:02}.pgm")), &t.image)?;
    }
    let mut rng = rng_for(cfg.seed, stream::HELDOUT);
    let (heldout, _) = collect_tools(&sim, &cfg.tool_gen, &cfg.collect, cfg.heldout_tools, &mut rng)?;
    save_dataset(&heldout, &cfg.heldout_path())?;
    println!(
        "collected {} records from {} tools ({} held-out records)",
        records.len(),
        tools.len(),
        heldout.len()
    );
    Ok(())
}

/// Places panels side by side with a 2-pixel mid-gray gap.
pub fn hstack(panels: &[GrayImage]) -> GrayImage {
    let gap = 2;
    let height = panels.iter().map(|p| p.height).max().unwrap_or(0);
    let width = panels.iter().map(|p| p.width).sum::<usize>() + gap * panels.len().saturating_sub(1);
    let mut out = GrayImage {
        width,
        height,
        values: vec![0.5; width * height],
    };
    let mut x0 = 0;
    for p in panels {
        for r in 0..p.height {
            for c in 0..p.width {
                out.values[r * width + x0 + c] = p.get(r, c);
            }
        }
        x0 += p.width + gap;
    }
    out
}

pub fn to_gray(img: &BinaryImage) -> GrayImage {
    GrayImage {
        width: img.width(),
        height: img.height(),
        values: img.pixels().iter().map(|&p| p as f64).collect(),
    }
}

/// Task-frame overlay: object at 0.35 gray, tool swept along `u` in white.
pub fn trajectory_overlay(sim: &Simulator, s: &BinaryImage, t: &BinaryImage, u: &ToolTrajectory) -> Result<GrayImage> {
    let sweep = sim.render_tool_sweep(&sim.tool_geometry(t), u, 25)?;
    let mut out = to_gray(s);
    for v in &mut out.values {
        *v *= 0.35;
    }
    for (r, c) in sweep.white_pixels() {
        out.values[r * out.width + c] = 1.0;
    }
    Ok(out)
}

/// s_current | tool + trajectory | s_predicted | s_final.
pub fn prediction_montage(sim: &Simulator, net: &ToolNetParams<f32>, rec: &EpisodeRecord) -> Result<GrayImage> {
    let pred = predict(net, &rec.s_initial, &rec.t, &rec.u)?;
    Ok(hstack(&[
        to_gray(&rec.s_initial),
        trajectory_overlay(sim, &rec.s_initial, &rec.t, &rec.u)?,
        pred,
        to_gray(&rec.s_final),
    ]))
}

pub fn cmd_train(cfg: &ExperimentConfig) -> Result<()> {
    let tc = cfg.effective_train();
    tc.validate()?;
    cfg.write_copy("train")?;
    let sim = cfg.simulator()?;
    let data = load_dataset(&cfg.dataset_path())?;
    if data.is_empty() {
        return Err(Error::Config("dataset is empty".into()));
    }
    let n_joints = data[0].u.n_joints();
    let net = build(n_joints, tc.seed)?;
    let out = train(net, &data, &tc, |e, l| println!("epoch {} mean loss {l:.6}", e + 1))?;
    save_checkpoint(&out.best, &cfg.checkpoint_path())?;
    write_text(&cfg.path("loss.csv"), &loss_curve_csv(&out.curve))?;
    let heldout = load_dataset(&cfg.heldout_path()).unwrap_or_default();
    let heldout_loss = if heldout.is_empty() {
        f64::NAN
    } else {
        evaluate_loss(&out.best, &heldout, tc.c_blur, tc.batch)?
    };
    write_text(
        &cfg.path("train_summary.csv"),
        &format!(
            "best_epoch,best_loss,first_loss,heldout_loss\n{},{:.9},{:.9},{:.9}\n",
            out.best_epoch + 1,
            out.best_loss,
            out.curve[0],
            heldout_loss
        ),
    )?;
    let dir = cfg.path("montage");
    ensure_dir(&dir)?;
    let source = if heldout.is_empty() { &data } else { &heldout };
    let step = (source.len() / cfg.montage_count.max(1)).max(1);
    for (k, rec) in source.iter().step_by(step).take(cfg.montage_count).enumerate() {
        write_gray_pgm(&dir.join(format!("montage_{k}.pgm")), &prediction_montage(&sim, &out.best, rec)?)?;
    }
    println!("best epoch {} loss {:.6}", out.best_epoch + 1, out.best_loss);
    Ok(())
}

/// Unique tool images of a dataset, in first-seen order.
pub fn tool_pool(records: &[EpisodeRecord]) -> Vec<BinaryImage> {
    let mut seen = std::collections::HashSet::new();
    records.iter().filter(|r| seen.insert(&r.t)).map(|r| r.t.clone()).collect()
}

/// Tool of the best candidate's lineage at every iteration, side by side.
pub fn transition_strip(result: &OptimizeResult) -> GrayImage {
    let panels: Vec<GrayImage> = result
        .history
        .iter()
        .filter(|h| h.candidate == result.best_candidate)
        .map(|h| to_gray(&h.t))
        .collect();
    hstack(&panels)
}

fn trajectory_csv(us: &[ToolTrajectory]) -> String {
    let n = us.first().map_or(0, ToolTrajectory::n_joints);
    let mut s = String::from("slot");
    for j in 0..n {
        s.push_str(&format!(",theta_start_{j}"));
    }
    for j in 0..n {
        s.push_str(&format!(",theta_end_{j}"));
    }
    s.push('\n');
    for (k, u) in us.iter().enumerate() {
        s.push_str(&k.to_string());
        for v in u.to_vec() {
            s.push_str(&format!(",{v:.12}"));
        }
        s.push('\n');
    }
    s
}

pub fn read_trajectory_csv(path: &Path) -> Result<Vec<ToolTrajectory>> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    text.lines()
        .skip(1)
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            let vals = l
                .split(',')
                .skip(1)
                .map(|v| v.trim().parse::<f64>().map_err(|e| Error::Config(format!("{}: {e}", path.display()))))
                .collect::<Result<Vec<f64>>>()?;
            Ok(ToolTrajectory::from_slice(&vals))
        })
        .collect()
}

fn write_optimize_outputs(dir: &Path, result: &OptimizeResult) -> Result<()> {
    ensure_dir(dir)?;
    write_binary_pgm(&dir.join("t_optimized.pgm"), &result.best.t)?;
    write_text(&dir.join("u_optimized.csv"), &trajectory_csv(&result.best.us))?;
    write_text(&dir.join("history.csv"), &history_csv(result))?;
    write_gray_pgm(&dir.join("strip.pgm"), &transition_strip(result))
}

/// Optimizes each task on its own, or all tasks together in multitask mode.
/// Trajectory-only runs need `fixed_t`, tool-only runs `fixed_u`.
pub fn cmd_optimize(cfg: &ExperimentConfig, fixed_t: Option<&BinaryImage>, fixed_u: Option<&ToolTrajectory>) -> Result<Vec<OptimizeResult>> {
    cfg.optimize.validate()?;
    cfg.write_copy("optimize")?;
    let sim = cfg.simulator()?;
    let net = load_checkpoint(&cfg.checkpoint_path(), Some(crate::sim2d::N_JOINTS))?;
    let pool = if fixed_t.is_some() && cfg.optimize.mode == OptimizeMode::TrajectoryOnly {
        Vec::new()
    } else {
        tool_pool(&load_dataset(&cfg.dataset_path())?)
    };
    let tasks = cfg.resolve_tasks(&sim)?;
    let specs: Vec<TaskSpec> = tasks.iter().map(|t| t.spec(&sim)).collect();
    let dir = cfg.optimize_dir();
    ensure_dir(&dir)?;
    write_text(&dir.join("tasks.json"), &serde_json::to_string_pretty(&tasks)?)?;
    let mut rng = rng_for(cfg.seed, stream::OPTIMIZE);
    let groups: Vec<(String, Vec<TaskSpec>)> = if cfg.multitask {
        vec![("multi".to_string(), specs)]
    } else {
        specs.into_iter().enumerate().map(|(k, s)| (format!("task_{k}"), vec![s])).collect()
    };
    let mut summary = String::from("group,loss,initial_min_loss,best_iteration,best_candidate\n");
    let mut results = Vec::with_capacity(groups.len());
    for (name, group) in &groups {
        let r = optimize(&net, group, &pool, &cfg.optimize, &sim.config.arm, fixed_t, fixed_u, &mut rng)?;
        write_optimize_outputs(&dir.join(name), &r)?;
        summary.push_str(&format!(
            "{name},{:.9e},{:.9e},{},{}\n",
            r.best.last_loss, r.initial_min_loss, r.best_iteration, r.best_candidate
        ));
        println!("{name}: loss {:.6} (initial best {:.6})", r.best.last_loss, r.initial_min_loss);
        results.push(r);
    }
    write_text(&dir.join("summary.csv"), &summary)?;
    Ok(results)
}

/// Zhang–Suen thinning to a one-pixel-wide skeleton.
pub fn thin(img: &BinaryImage) -> BinaryImage {
    let (h, w) = (img.height(), img.width());
    let mut cur = img.clone();
    let at = |im: &BinaryImage, r: i64, c: i64| -> u8 {
        if r < 0 || c < 0 || r >= h as i64 || c >= w as i64 {
            0
        } else {
            u8::from(im.get(r as usize, c as usize))
        }
    };
    loop {
        let mut changed = false;
        for pass in 0..2 {
            let mut remove = Vec::new();
            for r in 0..h {
                for c in 0..w {
                    if !cur.get(r, c) {
                        continue;
                    }
                    let (ri, ci) = (r as i64, c as i64);
                    // P2..P9 clockwise from north
                    let p = [
                        at(&cur, ri - 1, ci),
                        at(&cur, ri - 1, ci + 1),
                        at(&cur, ri, ci + 1),
                        at(&cur, ri + 1, ci + 1),
                        at(&cur, ri + 1, ci),
                        at(&cur, ri + 1, ci - 1),
                        at(&cur, ri, ci - 1),
                        at(&cur, ri - 1, ci - 1),
                    ];
                    let b: u8 = p.iter().sum();
                    let a = (0..8).filter(|&i| p[i] == 0 && p[(i + 1) % 8] == 1).count();
                    let cond = if pass == 0 {
                        p[0] * p[2] * p[4] == 0 && p[2] * p[4] * p[6] == 0
                    } else {
                        p[0] * p[2] * p[6] == 0 && p[0] * p[4] * p[6] == 0
                    };
                    if (2..=6).contains(&b) && a == 1 && cond {
                        remove.push((r, c));
                    }
                }
            }
            changed |= !remove.is_empty();
            for (r, c) in remove {
                cur.set(r, c, false);
            }
        }
        if !changed {
            return cur;
        }
    }
}

/// Automated stand-in for bending a wire after the optimized tool: thin the
/// image, take the geodesically longest skeleton path starting from the
/// skeleton pixel nearest the mount, and join it to the mount with a straight
/// segment. The path may step between skeleton pixels up to `max_gap` px
/// apart, bridging breaks in a fragmented image; `max_gap` = 1.5 keeps it
/// strictly 8-connected. Consecutive path pixels are joined by straight
/// segments, so the result is one 8-connected stroke.
pub fn wire_extract(t: &BinaryImage, spec: &RenderSpec, max_gap: f64) -> Result<BinaryImage> {
    let skel = thin(t);
    let pixels: Vec<(usize, usize)> = skel.white_pixels().collect();
    if pixels.is_empty() {
        return Err(Error::Unfabricable("empty skeleton".into()));
    }
    let mount = spec.mount_pixel();
    let dist_px = |a: (usize, usize), b: (usize, usize)| {
        let (dr, dc) = (a.0 as f64 - b.0 as f64, a.1 as f64 - b.1 as f64);
        (dr * dr + dc * dc).sqrt()
    };
    // row-major order makes the first minimum the tie-break winner
    let start = (0..pixels.len())
        .min_by(|&a, &b| dist_px(pixels[a], mount).total_cmp(&dist_px(pixels[b], mount)))
        .expect("nonempty");
    // Dijkstra over skeleton pixels, edges between pixels within max_gap.
    let n = pixels.len();
    let mut dist = vec![f64::INFINITY; n];
    let mut parent = vec![usize::MAX; n];
    let mut done = vec![false; n];
    dist[start] = 0.0;
    while let Some(cur) = (0..n)
        .filter(|&i| !done[i] && dist[i].is_finite())
        .min_by(|&a, &b| dist[a].total_cmp(&dist[b]))
    {
        done[cur] = true;
        for q in 0..n {
            let step = dist_px(pixels[cur], pixels[q]);
            if done[q] || step > max_gap {
                continue;
            }
            if dist[cur] + step < dist[q] {
                dist[q] = dist[cur] + step;
                parent[q] = cur;
            }
        }
    }
    let far = (0..n)
        .filter(|&i| dist[i].is_finite())
        .max_by(|&a, &b| dist[a].total_cmp(&dist[b]).then(b.cmp(&a)))
        .expect("start is reachable");
    let mut out = BinaryImage::new(skel.width(), skel.height());
    let mut draw = |a: (usize, usize), b: (usize, usize)| {
        for p in bresenham(a, b) {
            out.set(p.0, p.1, true);
        }
    };
    draw(mount, pixels[start]);
    let mut i = far;
    while parent[i] != usize::MAX {
        draw(pixels[i], pixels[parent[i]]);
        i = parent[i];
    }
    Ok(out)
}

/// Whether a fabricated tool is close enough to the optimized one.
pub fn fabricate_check(t_optimized: &BinaryImage, t_fabricated: &BinaryImage, threshold: f64) -> Result<(bool, f64)> {
    let d = chamfer_distance(t_optimized, t_fabricated)?;
    Ok((d < threshold, d))
}

/// How the trajectory is chosen in each evaluation repeat.
#[derive(Debug, Clone, Copy)]
pub enum UPolicy<'a> {
    Fixed(&'a ToolTrajectory),
    /// Trajectory-only optimization for the tool from the jittered state.
    Reoptimize(&'a OptimizeConfig),
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalOutcome {
    pub distances: Vec<f64>,
    /// Repeats whose simulation failed; excluded from the statistics.
    pub failures: usize,
    pub mean: f64,
    /// Population variance.
    pub var: f64,
}

pub fn mean_var(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    (mean, xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n)
}

/// Executes `tool` on `task` `repeats` times from Gaussian-jittered start
/// poses and measures the chamfer distance of the final state to the target.
#[allow(clippy::too_many_arguments)]
pub fn evaluate<R: Rng + ?Sized>(
    task: &TaskDef,
    tool: &BinaryImage,
    policy: UPolicy<'_>,
    net: &ToolNetParams<f32>,
    sim: &Simulator,
    repeats: usize,
    jitter_px: f64,
    rng: &mut R,
) -> Result<EvalOutcome> {
    let sigma = jitter_px * sim.render_spec().task_pixel();
    let normal = Normal::new(0.0, sigma).map_err(|e| Error::Config(format!("jitter: {e}")))?;
    let target = sim.render_task(&sim.disk(task.target));
    let geometry = sim.tool_geometry(tool);
    let mut distances = Vec::with_capacity(repeats);
    let mut failures = 0;
    for _ in 0..repeats.max(1) {
        let start = if sigma > 0.0 {
            [task.start[0] + normal.sample(rng), task.start[1] + normal.sample(rng)]
        } else {
            task.start
        };
        let disk = sim.disk(start);
        let s_current = sim.render_task(&disk);
        let u = match policy {
            UPolicy::Fixed(u) => u.clone(),
            UPolicy::Reoptimize(ocfg) => {
                let ocfg = OptimizeConfig {
                    mode: OptimizeMode::TrajectoryOnly,
                    per_task_u: false,
                    ..ocfg.clone()
                };
                let spec = TaskSpec::new(s_current.clone(), target.clone());
                let r = optimize(net, &[spec], &[], &ocfg, &sim.config.arm, Some(tool), None, rng)?;
                r.best.us[0].clone()
            }
        };
        match sim.simulate(disk, &geometry, &u, sim.config.substeps) {
            Ok(path) => {
                let last: &DiskObject = path.last().expect("substeps ≥ 2");
                distances.push(chamfer_distance(&sim.render_task(last), &target)?);
            }
            Err(Error::Unresolved { .. }) => failures += 1,
            Err(e) => return Err(e),
        }
    }
    let (mean, var) = mean_var(&distances);
    Ok(EvalOutcome {
        distances,
        failures,
        mean,
        var,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalRow {
    pub task: usize,
    pub tool_id: String,
    pub mean_px: f64,
    pub var_px: f64,
    pub fabricable: bool,
    pub failures: usize,
}

pub fn eval_csv(rows: &[EvalRow]) -> String {
    let mut s = String::from("task,tool_id,mean_px,var_px,fabricable\n");
    for r in rows {
        s.push_str(&format!("{},{},{:.6},{:.6},{}\n", r.task, r.tool_id, r.mean_px, r.var_px, r.fabricable));
    }
    s
}

/// One bar per row, grouped by task, heights proportional to mean_px.
pub fn bar_chart(rows: &[EvalRow]) -> GrayImage {
    let (bar, gap, height) = (6, 4, 64);
    let max = rows.iter().map(|r| r.mean_px).filter(|v| v.is_finite()).fold(1e-9, f64::max);
    let mut tasks: Vec<usize> = rows.iter().map(|r| r.task).collect();
    tasks.dedup();
    let width = rows.len() * (bar + 1) + tasks.len() * gap + gap;
    let mut img = GrayImage {
        width,
        height,
        values: vec![0.0; width * height],
    };
    let mut x = gap;
    let mut prev = None;
    for r in rows {
        if prev.is_some_and(|p| p != r.task) {
            x += gap;
        }
        prev = Some(r.task);
        let level = if r.tool_id == "optimized" { 1.0 } else { 0.6 };
        let h = if r.mean_px.is_finite() {
            ((r.mean_px / max) * (height - 1) as f64).round() as usize
        } else {
            0
        };
        for row in height - h..height {
            for c in x..x + bar {
                img.values[row * width + c] = level;
            }
        }
        x += bar + 1;
    }
    img
}

/// For each task: the wire-extracted optimized tool and the random baseline
/// tools, each with its trajectory re-optimized from every jittered start.
pub fn cmd_eval(cfg: &ExperimentConfig) -> Result<Vec<EvalRow>> {
    cfg.write_copy("eval")?;
    let sim = cfg.simulator()?;
    let net = load_checkpoint(&cfg.checkpoint_path(), Some(crate::sim2d::N_JOINTS))?;
    let tasks = cfg.resolve_tasks(&sim)?;
    let mut brng = rng_for(cfg.seed, stream::BASELINES);
    let baselines: Vec<BinaryImage> = (0..cfg.eval.n_baselines)
        .map(|_| generate_random_tool(&mut brng, sim.render_spec(), &cfg.tool_gen))
        .collect();
    let fab_dir = cfg.path("eval");
    ensure_dir(&fab_dir)?;
    for (i, b) in baselines.iter().enumerate() {
        write_binary_pgm(&fab_dir.join(format!("baseline_{i}.pgm")), b)?;
    }
    let mut rng = rng_for(cfg.seed, stream::EVAL);
    let policy = UPolicy::Reoptimize(&cfg.optimize);
    let mut rows = Vec::new();
    for (k, task) in tasks.iter().enumerate() {
        let group = if cfg.multitask { "multi".to_string() } else { format!("task_{k}") };
        let optimized = read_binary_pgm(&cfg.optimize_dir().join(group).join("t_optimized.pgm"))?;
        let (tool, fabricable) = match wire_extract(&optimized, sim.render_spec(), cfg.eval.wire_max_gap) {
            Ok(wire) => {
                let (ok, _) = fabricate_check(&optimized, &wire, cfg.eval.fabricate_threshold)?;
                (wire, ok)
            }
            Err(Error::Unfabricable(_)) => (optimized.clone(), false),
            Err(e) => return Err(e),
        };
        write_binary_pgm(&fab_dir.join(format!("fabricated_task_{k}.pgm")), &tool)?;
        let mut candidates = vec![("optimized".to_string(), tool, fabricable)];
        for (i, b) in baselines.iter().enumerate() {
            candidates.push((format!("random_{i}"), b.clone(), true));
        }
        for (tool_id, tool, fabricable) in candidates {
            let o = evaluate(task, &tool, policy, &net, &sim, cfg.eval.repeats, cfg.eval.jitter_px, &mut rng)?;
            println!("task {k} {tool_id}: mean {:.2} px var {:.2}", o.mean, o.var);
            rows.push(EvalRow {
                task: k,
                tool_id,
                mean_px: o.mean,
                var_px: o.var,
                fabricable,
                failures: o.failures,
            });
        }
    }
    write_text(&cfg.path("eval.csv"), &eval_csv(&rows))?;
    write_gray_pgm(&cfg.path("eval_bars.pgm"), &bar_chart(&rows))?;
    Ok(rows)
}

/// Writes task start/target images and the dataset's first records for inspection.
pub fn cmd_render(cfg: &ExperimentConfig) -> Result<()> {
    cfg.write_copy("render")?;
    let sim = cfg.simulator()?;
    let dir = cfg.path("render");
    ensure_dir(&dir)?;
    for (k, task) in cfg.resolve_tasks(&sim)?.iter().enumerate() {
        let spec = task.spec(&sim);
        write_gray_pgm(
            &dir.join(format!("task_{k}.pgm")),
            &hstack(&[to_gray(&spec.s_current), to_gray(&spec.s_target)]),
        )?;
    }
    if let Ok(data) = load_dataset(&cfg.dataset_path()) {
        for (i, rec) in data.iter().take(cfg.montage_count).enumerate() {
            let panel = hstack(&[
                to_gray(&rec.s_initial),
                trajectory_overlay(&sim, &rec.s_initial, &rec.t, &rec.u)?,
                to_gray(&rec.s_final),
                to_gray(&rec.t),
            ]);
            write_gray_pgm(&dir.join(format!("record_{i}.pgm")), &panel)?;
        }
    }
    Ok(())
}
