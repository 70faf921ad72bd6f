//! Data collection: random pushing motions with a given tool, changed/unchanged
//! balancing, frame-pair subsampling, mirror augmentation, and the on-disk
//! record format.

use std::fs;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{io_err, Error, Result};
use crate::imgcore::{chamfer_distance, mirror, BinaryImage, SIZE};
use crate::sim2d::{ArmConfig, DiskObject, Simulator};

pub use crate::sim2d::ToolTrajectory;

pub const MAGIC: &[u8; 8] = b"TLNETDS1";
pub const VERSION: u16 = 1;
pub const HEADER_LEN: usize = 16;
const IMAGE_BYTES: usize = SIZE * SIZE / 8;

/// One training tuple.
#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeRecord {
    pub s_initial: BinaryImage,
    pub s_final: BinaryImage,
    pub t: BinaryImage,
    pub u: ToolTrajectory,
}

impl EpisodeRecord {
    /// Horizontal mirror: images mirrored, joint angles negated.
    pub fn mirrored(&self) -> Self {
        Self {
            s_initial: mirror(&self.s_initial),
            s_final: mirror(&self.s_final),
            t: mirror(&self.t),
            u: self.u.negated(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CollectConfig {
    /// Minimum L1 joint-space span of a motion (rad).
    pub theta_thre: f64,
    /// Endpoint chamfer distance separating changed from unchanged motions (px).
    pub d_thre: f64,
    pub c_changed: usize,
    pub c_unchanged: usize,
    pub c_seq: usize,
    pub frames_per_motion: usize,
    pub motion_budget: usize,
    pub placement_tries: usize,
}

impl Default for CollectConfig {
    fn default() -> Self {
        Self {
            theta_thre: std::f64::consts::FRAC_PI_4,
            d_thre: 70.0,
            c_changed: 10,
            c_unchanged: 5,
            c_seq: 24,
            frames_per_motion: 25,
            motion_budget: 500,
            placement_tries: 100,
        }
    }
}

impl CollectConfig {
    pub fn validate(&self) -> Result<()> {
        if self.c_changed == 0 || self.c_unchanged == 0 || self.c_seq == 0 {
            return Err(Error::Config("collection counts must be positive".into()));
        }
        if self.frames_per_motion < 2 {
            return Err(Error::Config("frames_per_motion must be at least 2".into()));
        }
        if !(self.d_thre > 0.0) {
            return Err(Error::Config("d_thre must be positive".into()));
        }
        Ok(())
    }

    pub fn records_per_motion(&self) -> usize {
        2 * (1 + self.c_seq)
    }

    pub fn records_per_tool(&self) -> usize {
        (self.c_changed + self.c_unchanged) * self.records_per_motion()
    }
}

/// A recorded motion: rendered task state and joint angles at every frame.
#[derive(Debug, Clone)]
pub struct MotionFrames {
    pub u: ToolTrajectory,
    pub objects: Vec<DiskObject>,
    pub states: Vec<BinaryImage>,
    pub thetas: Vec<Vec<f64>>,
}

impl MotionFrames {
    pub fn first_state(&self) -> &BinaryImage {
        &self.states[0]
    }

    pub fn last_state(&self) -> &BinaryImage {
        self.states.last().expect("motion has frames")
    }
}

/// Substep indices sampled as frames, endpoints included.
pub fn frame_indices(substeps: usize, frames: usize) -> Vec<usize> {
    if frames < 2 {
        return vec![substeps - 1];
    }
    (0..frames)
        .map(|k| ((k * (substeps - 1)) as f64 / (frames - 1) as f64).round() as usize)
        .collect()
}

/// Uniform start/end angles within limits whose L1 span exceeds `theta_thre`.
pub fn sample_trajectory<R: Rng + ?Sized>(arm: &ArmConfig, theta_thre: f64, rng: &mut R) -> ToolTrajectory {
    let n = arm.joint_min.len();
    let draw = |rng: &mut R| -> Vec<f64> {
        (0..n).map(|j| rng.random_range(arm.joint_min[j]..=arm.joint_max[j])).collect()
    };
    loop {
        let u = ToolTrajectory::new(draw(rng), draw(rng));
        if u.l1_span() > theta_thre {
            return u;
        }
    }
}

/// Uniform trajectory within limits, no span constraint.
pub fn sample_trajectory_unconstrained<R: Rng + ?Sized>(arm: &ArmConfig, rng: &mut R) -> ToolTrajectory {
    sample_trajectory(arm, f64::NEG_INFINITY, rng)
}

/// Disk placed uniformly with its full extent inside the crop, not touching
/// the tool at `theta`.
pub fn place_object<R: Rng + ?Sized>(
    sim: &Simulator,
    tool: &crate::sim2d::ToolGeometry,
    theta: &[f64],
    tries: usize,
    rng: &mut R,
) -> Result<DiskObject> {
    let spec = sim.render_spec();
    let r = sim.config.disk_radius;
    let half = spec.crop_size / 2.0;
    let bx = sim.base_x();
    for _ in 0..tries {
        let disk = sim.disk([
            rng.random_range(bx - half + r..bx + half - r),
            rng.random_range(spec.crop_y_min + r..spec.crop_y_min + spec.crop_size - r),
        ]);
        if sim.is_collision_free(&disk, tool, theta)? {
            return Ok(disk);
        }
    }
    Err(Error::Placement(tries))
}

/// One random motion with `tool`, recorded at `cfg.frames_per_motion` frames.
pub fn collect_motion<R: Rng + ?Sized>(
    sim: &Simulator,
    tool: &BinaryImage,
    cfg: &CollectConfig,
    rng: &mut R,
) -> Result<MotionFrames> {
    if tool.white_count() == 0 {
        return Err(Error::InvalidImage("tool image is empty".into()));
    }
    let geometry = sim.tool_geometry(tool);
    let u = sample_trajectory(sim.arm(), cfg.theta_thre, rng);
    let object0 = place_object(sim, &geometry, &u.start, cfg.placement_tries, rng)?;
    let substeps = sim.config.substeps;
    let path = sim.simulate(object0, &geometry, &u, substeps)?;
    let idx = frame_indices(substeps, cfg.frames_per_motion);
    let objects: Vec<DiskObject> = idx.iter().map(|&i| path[i]).collect();
    Ok(MotionFrames {
        states: objects.iter().map(|o| sim.render_task(o)).collect(),
        thetas: idx.iter().map(|&i| u.at_step(i, substeps)).collect(),
        objects,
        u,
    })
}

pub fn classify_changed(s_start: &BinaryImage, s_end: &BinaryImage, d_thre: f64) -> Result<bool> {
    Ok(chamfer_distance(s_start, s_end)? >= d_thre)
}

/// Endpoint record, `c_seq` random sub-interval records, then the mirror of
/// each: `2(1 + c_seq)` records.
pub fn augment<R: Rng + ?Sized>(
    motion: &MotionFrames,
    tool: &BinaryImage,
    c_seq: usize,
    rng: &mut R,
) -> Result<Vec<EpisodeRecord>> {
    let f = motion.states.len();
    if f < 2 {
        return Err(Error::Config("a motion needs at least 2 frames".into()));
    }
    let record = |from: usize, to: usize| EpisodeRecord {
        s_initial: motion.states[from].clone(),
        s_final: motion.states[to].clone(),
        t: tool.clone(),
        u: ToolTrajectory::new(motion.thetas[from].clone(), motion.thetas[to].clone()),
    };
    let mut out = Vec::with_capacity(2 * (1 + c_seq));
    out.push(record(0, f - 1));
    for _ in 0..c_seq {
        let a = rng.random_range(0..f);
        let mut b = rng.random_range(0..f - 1);
        if b >= a {
            b += 1;
        }
        out.push(record(a.min(b), a.max(b)));
    }
    let mirrored: Vec<EpisodeRecord> = out.iter().map(EpisodeRecord::mirrored).collect();
    out.extend(mirrored);
    Ok(out)
}

/// Outcome counters of a per-tool collection run.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct CollectStats {
    pub motions: usize,
    pub changed: usize,
    pub unchanged: usize,
    pub discarded: usize,
    pub sim_failures: usize,
}

/// Collects motions until both quotas are banked; over-quota motions are
/// dropped. Motions whose contact resolution fails are skipped but still
/// count against the budget.
pub fn collect_for_tool<R: Rng + ?Sized>(
    sim: &Simulator,
    tool: &BinaryImage,
    cfg: &CollectConfig,
    rng: &mut R,
) -> Result<(Vec<EpisodeRecord>, CollectStats)> {
    cfg.validate()?;
    let mut stats = CollectStats::default();
    let mut records = Vec::with_capacity(cfg.records_per_tool());
    while stats.changed < cfg.c_changed || stats.unchanged < cfg.c_unchanged {
        if stats.motions >= cfg.motion_budget {
            return Err(Error::MotionBudget {
                budget: cfg.motion_budget,
                changed: stats.changed,
                unchanged: stats.unchanged,
            });
        }
        stats.motions += 1;
        let motion = match collect_motion(sim, tool, cfg, rng) {
            Ok(m) => m,
            Err(Error::Unresolved { .. }) => {
                stats.sim_failures += 1;
                continue;
            }
            Err(e) => return Err(e),
        };
        let changed = classify_changed(motion.first_state(), motion.last_state(), cfg.d_thre)?;
        let slot = if changed { &mut stats.changed } else { &mut stats.unchanged };
        let quota = if changed { cfg.c_changed } else { cfg.c_unchanged };
        if *slot >= quota {
            stats.discarded += 1;
            continue;
        }
        *slot += 1;
        records.extend(augment(&motion, tool, cfg.c_seq, rng)?);
    }
    Ok((records, stats))
}

fn pack_bits(img: &BinaryImage, out: &mut Vec<u8>) {
    for chunk in img.pixels().chunks(8) {
        let mut byte = 0u8;
        for (k, &p) in chunk.iter().enumerate() {
            if p != 0 {
                byte |= 0x80 >> k;
            }
        }
        out.push(byte);
    }
}

fn unpack_bits(bytes: &[u8]) -> BinaryImage {
    let pixels = (0..SIZE * SIZE).map(|i| (bytes[i / 8] >> (7 - i % 8)) & 1).collect();
    BinaryImage::from_pixels(SIZE, SIZE, pixels).expect("packed image has the right size")
}

pub fn record_len(n_joints: usize) -> usize {
    3 * IMAGE_BYTES + 2 * n_joints * 4
}

pub fn encode_dataset(records: &[EpisodeRecord]) -> Result<Vec<u8>> {
    let n = records.first().map_or(crate::sim2d::N_JOINTS, |r| r.u.n_joints());
    let mut out = Vec::with_capacity(HEADER_LEN + records.len() * record_len(n));
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(n as u16).to_le_bytes());
    out.extend_from_slice(&(records.len() as u32).to_le_bytes());
    for (i, r) in records.iter().enumerate() {
        for img in [&r.s_initial, &r.s_final, &r.t] {
            if img.width() != SIZE || img.height() != SIZE {
                return Err(Error::SizeMismatch(img.width(), img.height(), SIZE, SIZE));
            }
            pack_bits(img, &mut out);
        }
        if r.u.n_joints() != n || r.u.end.len() != n {
            return Err(Error::Config(format!("record {i} has {} joints, expected {n}", r.u.n_joints())));
        }
        for v in r.u.to_vec() {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode_dataset(bytes: &[u8]) -> Result<Vec<EpisodeRecord>> {
    let what = "dataset";
    if bytes.len() < HEADER_LEN {
        return Err(Error::Format {
            what,
            offset: bytes.len() as u64,
            detail: "header is shorter than 16 bytes".into(),
        });
    }
    if &bytes[..8] != MAGIC {
        return Err(Error::Format { what, offset: 0, detail: "bad magic".into() });
    }
    let version = u16::from_le_bytes([bytes[8], bytes[9]]);
    if version != VERSION {
        return Err(Error::Format { what, offset: 8, detail: format!("unsupported version {version}") });
    }
    let n = u16::from_le_bytes([bytes[10], bytes[11]]) as usize;
    if n == 0 {
        return Err(Error::Format { what, offset: 10, detail: "zero joints".into() });
    }
    let count = u32::from_le_bytes([bytes[12], bytes[13], bytes[14], bytes[15]]) as usize;
    let rec = record_len(n);
    let available = (bytes.len() - HEADER_LEN) / rec;
    if available < count {
        return Err(Error::Truncated {
            what,
            record: available,
            offset: (HEADER_LEN + available * rec) as u64,
        });
    }
    let expected = HEADER_LEN + count * rec;
    if bytes.len() != expected {
        return Err(Error::Format {
            what,
            offset: expected as u64,
            detail: format!("{} trailing bytes after record {count}", bytes.len() - expected),
        });
    }
    let mut out = Vec::with_capacity(count);
    for i in 0..count {
        let base = HEADER_LEN + i * rec;
        let img = |k: usize| unpack_bits(&bytes[base + k * IMAGE_BYTES..base + (k + 1) * IMAGE_BYTES]);
        let fbase = base + 3 * IMAGE_BYTES;
        let u: Vec<f64> = (0..2 * n)
            .map(|j| {
                let o = fbase + 4 * j;
                f32::from_le_bytes([bytes[o], bytes[o + 1], bytes[o + 2], bytes[o + 3]]) as f64
            })
            .collect();
        if u.iter().any(|v| !v.is_finite()) {
            return Err(Error::Format { what, offset: fbase as u64, detail: format!("record {i}: non-finite angle") });
        }
        out.push(EpisodeRecord {
            s_initial: img(0),
            s_final: img(1),
            t: img(2),
            u: ToolTrajectory::from_slice(&u),
        });
    }
    Ok(out)
}

pub fn save_dataset(records: &[EpisodeRecord], path: &Path) -> Result<()> {
    fs::write(path, encode_dataset(records)?).map_err(io_err(path))
}

pub fn load_dataset(path: &Path) -> Result<Vec<EpisodeRecord>> {
    decode_dataset(&fs::read(path).map_err(io_err(path))?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim2d::{generate_random_tool, SimConfig, ToolGenConfig};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::FRAC_PI_4;

    fn sim() -> Simulator {
        Simulator::new(SimConfig::default()).unwrap()
    }

    fn tool(seed: u64) -> BinaryImage {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        generate_random_tool(&mut rng, &Default::default(), &ToolGenConfig::default())
    }

    #[test]
    fn frame_grid_includes_endpoints() {
        let idx = frame_indices(200, 25);
        assert_eq!(idx.len(), 25);
        assert_eq!((idx[0], idx[24]), (0, 199));
        assert!(idx.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn sampled_trajectories_respect_limits_and_span() {
        let arm = ArmConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..1000 {
            let u = sample_trajectory(&arm, FRAC_PI_4, &mut rng);
            assert!(u.l1_span() > FRAC_PI_4);
            assert!(u.to_vec().iter().all(|v| v.abs() <= FRAC_PI_4));
        }
    }

    #[test]
    fn motion_endpoints_match_trajectory() {
        let s = sim();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let m = collect_motion(&s, &tool(3), &CollectConfig::default(), &mut rng).unwrap();
        assert_eq!(m.states.len(), 25);
        assert_eq!(m.thetas[0], m.u.start);
        assert_eq!(m.thetas[24], m.u.end);
        assert!(collect_motion(&s, &BinaryImage::new(64, 64), &CollectConfig::default(), &mut rng).is_err());
    }

    #[test]
    fn classify_examples() {
        let s = sim();
        let a = s.render_task(&s.disk([0.0, 0.45]));
        assert!(!classify_changed(&a, &a, 70.0).unwrap());
        assert!(classify_changed(&a, &a, 0.0).unwrap());
        let px = s.render_spec().task_pixel();
        let big = DiskObject { center: [0.0, 0.45], radius: 5.0 * px };
        let moved = DiskObject { center: [20.0 * px, 0.45], radius: 5.0 * px };
        let (x, y) = (s.render_task(&big), s.render_task(&moved));
        // two ~78 px disks 20 px apart: every pixel is ≥10 px from the other disk
        let d = chamfer_distance(&x, &y).unwrap();
        assert!(d >= 2.0 * 70.0 * 10.0, "{d}");
        assert!(classify_changed(&x, &y, 70.0).unwrap());
    }

    #[test]
    fn augment_counts_and_mirrors() {
        let s = sim();
        let t = tool(4);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let m = collect_motion(&s, &t, &CollectConfig::default(), &mut rng).unwrap();
        let recs = augment(&m, &t, 24, &mut rng).unwrap();
        assert_eq!(recs.len(), 50);
        assert_eq!(recs[0].s_initial, m.states[0]);
        assert_eq!(&recs[0].s_final, m.last_state());
        for r in &recs[..25] {
            let from = m.thetas.iter().position(|th| *th == r.u.start).unwrap();
            let to = m.thetas.iter().position(|th| *th == r.u.end).unwrap();
            assert!(from < to);
        }
        for (a, b) in recs[..25].iter().zip(&recs[25..]) {
            assert_eq!(b.u, a.u.negated());
            assert_eq!(b.s_initial, mirror(&a.s_initial));
            assert_eq!(b.s_final, mirror(&a.s_final));
            assert_eq!(b.t, mirror(&a.t));
        }
    }

    #[test]
    fn mirrored_records_are_reproduced_by_simulation() {
        let s = sim();
        let cfg = CollectConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for k in 0..20 {
            let t = tool(100 + k);
            let m = collect_motion(&s, &t, &cfg, &mut rng).unwrap();
            let rec = augment(&m, &t, 0, &mut rng).unwrap().pop().unwrap();
            let geom = s.tool_geometry(&rec.t);
            let path = s.simulate(m.objects[0].mirrored(0.0), &geom, &rec.u, s.config.substeps).unwrap();
            assert_eq!(s.render_task(path.last().unwrap()), rec.s_final);
            assert_eq!(s.render_task(&path[0]), rec.s_initial);
        }
    }

    #[test]
    fn one_tool_yields_balanced_750_records() {
        let s = sim();
        let cfg = CollectConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let t = tool(8);
        let (recs, stats) = collect_for_tool(&s, &t, &cfg, &mut rng).unwrap();
        assert_eq!(recs.len(), 750);
        assert_eq!((stats.changed, stats.unchanged), (10, 5));
        let mut changed = 0;
        for motion in recs.chunks(50) {
            assert!(motion.iter().all(|r| r.t == t || r.t == mirror(&t)));
            if classify_changed(&motion[0].s_initial, &motion[0].s_final, cfg.d_thre).unwrap() {
                changed += 1;
            }
        }
        assert_eq!(changed, 10);
    }

    #[test]
    fn budget_exhaustion_is_an_error() {
        let s = sim();
        let cfg = CollectConfig { motion_budget: 3, ..Default::default() };
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        assert!(matches!(collect_for_tool(&s, &tool(1), &cfg, &mut rng), Err(Error::MotionBudget { .. })));
    }

    #[test]
    fn file_roundtrip_and_errors() {
        let s = sim();
        let t = tool(10);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let m = collect_motion(&s, &t, &CollectConfig::default(), &mut rng).unwrap();
        let mut recs = augment(&m, &t, 3, &mut rng).unwrap();
        // stored angles are f32
        for r in &mut recs {
            r.u = ToolTrajectory::from_slice(&r.u.to_vec().iter().map(|&v| v as f32 as f64).collect::<Vec<_>>());
        }
        let bytes = encode_dataset(&recs).unwrap();
        assert_eq!(bytes.len(), HEADER_LEN + recs.len() * record_len(2));
        assert_eq!(decode_dataset(&bytes).unwrap(), recs);

        let empty = encode_dataset(&[]).unwrap();
        assert_eq!(empty.len(), 16);
        assert!(decode_dataset(&empty).unwrap().is_empty());

        let mut bad = bytes.clone();
        bad[12..16].copy_from_slice(&100u32.to_le_bytes());
        match decode_dataset(&bad) {
            Err(Error::Truncated { record, .. }) => assert_eq!(record, recs.len()),
            other => panic!("{other:?}"),
        }
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(decode_dataset(&bad), Err(Error::Format { offset: 0, .. })));
        assert!(decode_dataset(&bytes[..bytes.len() - 1]).is_err());

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.bin");
        save_dataset(&recs, &path).unwrap();
        assert_eq!(load_dataset(&path).unwrap(), recs);
    }
}
