//! Optimization of tool image and trajectory through the frozen network:
//! normalized gradient steps on u, score-sorted pixel flips on t, and
//! minimum-loss selection over every evaluated candidate state.

use nn::{BatchNormMode, Scalar, Tape};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::sample_trajectory_unconstrained;
use crate::error::{Error, Result};
use crate::imgcore::{add_noise_to_tool, blur, BinaryImage, GrayImage};
use crate::sim2d::{ArmConfig, ToolTrajectory};
use crate::toolnet::{forward_graph, gray_batch, image_batch, trajectory_batch, GradFlags, ToolNetParams};

/// Gradient norms below this skip the trajectory step.
pub const DEGENERATE_GRAD: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizeMode {
    ToolOnly,
    TrajectoryOnly,
    Both,
}

impl OptimizeMode {
    pub fn updates_tool(self) -> bool {
        matches!(self, Self::ToolOnly | Self::Both)
    }

    pub fn updates_trajectory(self) -> bool {
        matches!(self, Self::TrajectoryOnly | Self::Both)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimizeConfig {
    pub c_batch: usize,
    pub c_iter: usize,
    /// Trajectory step length (rad).
    pub gamma: f64,
    pub c_scale: f64,
    pub c_grad: f64,
    pub c_add: usize,
    pub c_del: usize,
    pub mode: OptimizeMode,
    pub c_blur: f64,
    /// Noise applied to initial tools drawn from the dataset.
    pub init_noise_add: usize,
    pub init_noise_del: usize,
    /// Optimize one trajectory per task instead of one shared trajectory.
    pub per_task_u: bool,
}

impl Default for OptimizeConfig {
    fn default() -> Self {
        Self {
            c_batch: 10,
            c_iter: 50,
            gamma: 0.1,
            c_scale: 1e-3,
            c_grad: 0.1,
            c_add: 10,
            c_del: 10,
            mode: OptimizeMode::Both,
            c_blur: 0.2,
            init_noise_add: 30,
            init_noise_del: 30,
            per_task_u: false,
        }
    }
}

impl OptimizeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.c_batch == 0 || self.c_iter == 0 {
            return Err(Error::Config("c_batch and c_iter must be at least 1".into()));
        }
        if !(self.gamma > 0.0) {
            return Err(Error::Config("gamma must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskSpec {
    pub s_current: BinaryImage,
    pub s_target: BinaryImage,
    pub weight: f64,
}

impl TaskSpec {
    pub fn new(s_current: BinaryImage, s_target: BinaryImage) -> Self {
        Self {
            s_current,
            s_target,
            weight: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Candidate {
    pub t: BinaryImage,
    /// One shared trajectory, or one per task in per-task mode.
    pub us: Vec<ToolTrajectory>,
    pub last_loss: f64,
}

impl Candidate {
    pub fn new(t: BinaryImage, u: ToolTrajectory) -> Self {
        Self {
            t,
            us: vec![u],
            last_loss: f64::INFINITY,
        }
    }

    /// Trajectory executed for task `k`.
    pub fn u(&self, k: usize) -> &ToolTrajectory {
        &self.us[k.min(self.us.len() - 1)]
    }
}

/// Loss of one candidate and its gradients with respect to t and u.
#[derive(Debug, Clone, PartialEq)]
pub struct LossEval {
    pub total: f64,
    /// Weighted loss of each task; sums to `total`.
    pub per_task: Vec<f64>,
    /// dL/dt, row-major.
    pub g_tool: Vec<f64>,
    /// dL/du for each trajectory slot of the candidate.
    pub g_control: Vec<Vec<f64>>,
}

/// Losses and input gradients of several candidates. The network runs in
/// eval mode, so the candidates share one batched forward pass per task
/// without interacting.
pub fn batch_loss<T: Scalar>(net: &ToolNetParams<T>, tasks: &[TaskSpec], cands: &[Candidate], c_blur: f64) -> Result<Vec<LossEval>> {
    if tasks.is_empty() {
        return Err(Error::Config("at least one task is required".into()));
    }
    let n = cands.len();
    let px = net.arch.image_size * net.arch.image_size;
    let nu = 2 * net.arch.n_joints;
    let mut out: Vec<LossEval> = cands
        .iter()
        .map(|c| LossEval {
            total: 0.0,
            per_task: vec![0.0; tasks.len()],
            g_tool: vec![0.0; px],
            g_control: vec![vec![0.0; nu]; c.us.len()],
        })
        .collect();
    if n == 0 {
        return Ok(out);
    }
    let mut tape = Tape::<T>::new();
    let ts: Vec<&BinaryImage> = cands.iter().map(|c| &c.t).collect();
    let mut graphs = Vec::with_capacity(tasks.len());
    let mut total = None;
    for (k, task) in tasks.iter().enumerate() {
        if !(task.weight > 0.0) {
            return Err(Error::Config(format!("task {k} weight must be positive")));
        }
        task.s_current.same_size(&task.s_target)?;
        let target: GrayImage = blur(&task.s_target, c_blur);
        let targets: Vec<&GrayImage> = vec![&target; n];
        let ss: Vec<&BinaryImage> = vec![&task.s_current; n];
        let us: Vec<&ToolTrajectory> = cands.iter().map(|c| c.u(k)).collect();
        let g = forward_graph(
            &mut tape,
            net,
            image_batch(&ss),
            image_batch(&ts),
            trajectory_batch(&us),
            BatchNormMode::Eval,
            GradFlags::TOOL_AND_TRAJECTORY,
        )?;
        let pred = tape.value(g.output).data();
        let tdata = &target.values;
        for (i, o) in out.iter_mut().enumerate() {
            let sq: f64 = pred[i * px..(i + 1) * px]
                .iter()
                .zip(tdata)
                .map(|(p, t)| (p.as_f64() - t).powi(2))
                .sum();
            let l = task.weight * sq / px as f64;
            o.per_task[k] = l;
            o.total += l;
        }
        // n · mse = Σ per-candidate mse; each candidate's inputs only reach its own term
        let tv = tape.constant(gray_batch(&targets));
        let mse = tape.mse(g.output, tv)?;
        let scaled = tape.scale(mse, T::lit(task.weight * n as f64))?;
        total = Some(match total {
            None => scaled,
            Some(acc) => tape.add(acc, scaled)?,
        });
        graphs.push(g);
    }
    let grads = tape.backward(total.expect("tasks nonempty"))?;
    for (k, g) in graphs.iter().enumerate() {
        let gt = grads.get(g.t).expect("t is differentiable").data();
        let gu = grads.get(g.u).expect("u is differentiable").data();
        for (i, o) in out.iter_mut().enumerate() {
            for (acc, v) in o.g_tool.iter_mut().zip(&gt[i * px..(i + 1) * px]) {
                *acc += v.as_f64();
            }
            let slot = k.min(o.g_control.len() - 1);
            for (acc, v) in o.g_control[slot].iter_mut().zip(&gu[i * nu..(i + 1) * nu]) {
                *acc += v.as_f64();
            }
        }
    }
    for o in &out {
        if !o.total.is_finite() {
            return Err(Error::Nn(nn::NnError::NonFinite { op: "candidate_loss" }));
        }
    }
    Ok(out)
}

/// L = Σ_k weight_k · mse(f(s_k, t, u_k), blur(target_k)) with dL/dt, dL/du.
pub fn candidate_loss<T: Scalar>(net: &ToolNetParams<T>, tasks: &[TaskSpec], cand: &Candidate, c_blur: f64) -> Result<LossEval> {
    Ok(batch_loss(net, tasks, std::slice::from_ref(cand), c_blur)?.remove(0))
}

/// `u − γ·g/‖g‖₂`, clamped to the joint limits. Returns the input unchanged
/// (and `false`) when the gradient is degenerate.
pub fn trajectory_step(u: &ToolTrajectory, g_control: &[f64], gamma: f64, arm: &ArmConfig) -> (ToolTrajectory, bool) {
    let norm = g_control.iter().map(|g| g * g).sum::<f64>().sqrt();
    if norm < DEGENERATE_GRAD || !norm.is_finite() {
        return (u.clone(), false);
    }
    let n = u.n_joints();
    let stepped: Vec<f64> = u
        .to_vec()
        .iter()
        .zip(g_control)
        .enumerate()
        .map(|(i, (v, g))| (v - gamma * g / norm).clamp(arm.joint_min[i % n], arm.joint_max[i % n]))
        .collect();
    (ToolTrajectory::from_slice(&stepped), true)
}

/// Score of pixel `idx`: negative-gradient black pixels touching the tool
/// sort first, positive-gradient white pixels (more so when surrounded)
/// sort last, everything else is damped by `c_grad`.
pub fn calc_score(t: &BinaryImage, g_tool: &[f64], idx: usize, c_scale: f64, c_grad: f64) -> f64 {
    let g = g_tool[idx];
    let adj = t.count_adjacent_white(idx);
    let white = t.is_white_at(idx);
    if !white && g < 0.0 && adj > 0 {
        g
    } else if white && g > 0.0 {
        g + c_scale * adj as f64
    } else {
        c_grad * g
    }
}

/// Whitens the `c_add` lowest-scoring pixels and blackens the `c_del`
/// highest-scoring ones. Ties sort by row-major index; the two sets never
/// overlap (the back set shrinks when they would).
pub fn optimize_tool(t: &BinaryImage, g_tool: &[f64], c_add: usize, c_del: usize, c_scale: f64, c_grad: f64) -> BinaryImage {
    let n = t.len();
    let scores: Vec<f64> = (0..n).map(|i| calc_score(t, g_tool, i, c_scale, c_grad)).collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]).then(a.cmp(&b)));
    let front = c_add.min(n);
    let back_start = n.saturating_sub(c_del).max(front);
    let mut out = t.clone();
    for &i in &order[..front] {
        out.set_at(i, true);
    }
    for &i in &order[back_start..] {
        out.set_at(i, false);
    }
    out
}

/// Initial candidates: noisy tools drawn from `tool_pool` and uniform
/// trajectories, with the fixed component substituted per mode.
#[allow(clippy::too_many_arguments)]
pub fn init_candidates<R: Rng + ?Sized>(
    tool_pool: &[BinaryImage],
    cfg: &OptimizeConfig,
    arm: &ArmConfig,
    n_tasks: usize,
    fixed_t: Option<&BinaryImage>,
    fixed_u: Option<&ToolTrajectory>,
    rng: &mut R,
) -> Result<Vec<Candidate>> {
    cfg.validate()?;
    let slots = if cfg.per_task_u { n_tasks.max(1) } else { 1 };
    let tool_fixed = match (cfg.mode, fixed_t) {
        (OptimizeMode::TrajectoryOnly, None) => {
            return Err(Error::Config("trajectory-only optimization needs a fixed tool".into()))
        }
        (OptimizeMode::TrajectoryOnly, Some(t)) => Some(t),
        _ => None,
    };
    let u_fixed = match (cfg.mode, fixed_u) {
        (OptimizeMode::ToolOnly, None) => {
            return Err(Error::Config("tool-only optimization needs a fixed trajectory".into()))
        }
        (OptimizeMode::ToolOnly, Some(u)) => Some(u),
        _ => None,
    };
    if tool_fixed.is_none() && tool_pool.is_empty() {
        return Err(Error::Config("no tools to draw initial candidates from".into()));
    }
    let mut out = Vec::with_capacity(cfg.c_batch);
    for _ in 0..cfg.c_batch {
        let t = match tool_fixed {
            Some(t) => t.clone(),
            None => {
                let base = &tool_pool[rng.random_range(0..tool_pool.len())];
                add_noise_to_tool(base, cfg.init_noise_add, cfg.init_noise_del, rng)
            }
        };
        let us = (0..slots)
            .map(|_| match u_fixed {
                Some(u) => u.clone(),
                None => sample_trajectory_unconstrained(arm, rng),
            })
            .collect();
        out.push(Candidate {
            t,
            us,
            last_loss: f64::INFINITY,
        });
    }
    Ok(out)
}

/// One evaluated candidate state.
#[derive(Debug, Clone, PartialEq)]
pub struct HistoryEntry {
    pub iteration: usize,
    pub candidate: usize,
    pub loss: f64,
    pub per_task: Vec<f64>,
    pub t: BinaryImage,
    pub us: Vec<ToolTrajectory>,
}

#[derive(Debug, Clone)]
pub struct OptimizeResult {
    pub best: Candidate,
    pub best_iteration: usize,
    pub best_candidate: usize,
    pub best_per_task: Vec<f64>,
    /// Every evaluated state, iteration-major.
    pub history: Vec<HistoryEntry>,
    /// Smallest loss among the initial candidates.
    pub initial_min_loss: f64,
    /// Trajectory steps skipped for a degenerate gradient.
    pub skipped_steps: usize,
}

/// Runs `c_iter` rounds over the candidates. Each round evaluates every
/// candidate and records that state; all rounds but the last then apply the
/// updates, so exactly `c_iter · c_batch` states are recorded and every
/// applied update is evaluated.
pub fn optimize_from<T: Scalar>(
    net: &ToolNetParams<T>,
    tasks: &[TaskSpec],
    mut cands: Vec<Candidate>,
    cfg: &OptimizeConfig,
    arm: &ArmConfig,
) -> Result<OptimizeResult> {
    cfg.validate()?;
    let mut history = Vec::with_capacity(cfg.c_iter * cands.len());
    let mut skipped_steps = 0;
    for it in 0..cfg.c_iter {
        let evals = batch_loss(net, tasks, &cands, cfg.c_blur)?;
        for (ci, (cand, ev)) in cands.iter_mut().zip(evals).enumerate() {
            cand.last_loss = ev.total;
            history.push(HistoryEntry {
                iteration: it,
                candidate: ci,
                loss: ev.total,
                per_task: ev.per_task.clone(),
                t: cand.t.clone(),
                us: cand.us.clone(),
            });
            if it + 1 == cfg.c_iter {
                continue;
            }
            if cfg.mode.updates_trajectory() {
                for (u, g) in cand.us.iter_mut().zip(&ev.g_control) {
                    let (next, stepped) = trajectory_step(u, g, cfg.gamma, arm);
                    skipped_steps += usize::from(!stepped);
                    *u = next;
                }
            }
            if cfg.mode.updates_tool() {
                cand.t = optimize_tool(&cand.t, &ev.g_tool, cfg.c_add, cfg.c_del, cfg.c_scale, cfg.c_grad);
            }
        }
    }
    let best = history
        .iter()
        .min_by(|a, b| {
            a.loss
                .total_cmp(&b.loss)
                .then(a.candidate.cmp(&b.candidate))
                .then(a.iteration.cmp(&b.iteration))
        })
        .expect("at least one state recorded");
    let initial_min_loss = history
        .iter()
        .filter(|h| h.iteration == 0)
        .map(|h| h.loss)
        .fold(f64::INFINITY, f64::min);
    Ok(OptimizeResult {
        best: Candidate {
            t: best.t.clone(),
            us: best.us.clone(),
            last_loss: best.loss,
        },
        best_iteration: best.iteration,
        best_candidate: best.candidate,
        best_per_task: best.per_task.clone(),
        initial_min_loss,
        skipped_steps,
        history,
    })
}

/// Draws initial candidates and optimizes them.
#[allow(clippy::too_many_arguments)]
pub fn optimize<T: Scalar, R: Rng + ?Sized>(
    net: &ToolNetParams<T>,
    tasks: &[TaskSpec],
    tool_pool: &[BinaryImage],
    cfg: &OptimizeConfig,
    arm: &ArmConfig,
    fixed_t: Option<&BinaryImage>,
    fixed_u: Option<&ToolTrajectory>,
    rng: &mut R,
) -> Result<OptimizeResult> {
    let cands = init_candidates(tool_pool, cfg, arm, tasks.len(), fixed_t, fixed_u, rng)?;
    optimize_from(net, tasks, cands, cfg, arm)
}

/// `candidate,iteration,loss[,task_k...]` rows of the history.
pub fn history_csv(result: &OptimizeResult) -> String {
    let n_tasks = result.history.first().map_or(0, |h| h.per_task.len());
    let mut s = String::from("candidate,iteration,loss");
    for k in 0..n_tasks {
        s.push_str(&format!(",task_{k}"));
    }
    s.push('\n');
    for h in &result.history {
        s.push_str(&format!("{},{},{:.9e}", h.candidate, h.iteration, h.loss));
        for l in &h.per_task {
            s.push_str(&format!(",{l:.9e}"));
        }
        s.push('\n');
    }
    s
}
