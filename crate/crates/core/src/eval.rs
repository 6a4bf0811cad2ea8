//! Pose error metrics and the two experiment harnesses: the
//! motion-compensation ablation (STV vs RSTV) and the temporal-window sweep.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::domain::{Pose3D, SkeletonSpec};
use crate::error::{Error, Result};
use crate::hog3d::Descriptor;
use crate::manifest::Sequence;
use crate::pipeline::{center_poses, fit_model, sequence_descriptors, Alignment, PipelineConfig, Variant};
use crate::regress::{ModelKind, PoseRegressor};

fn same_skeleton(a: &Pose3D, b: &Pose3D) -> Result<()> {
    if a.joint_count() != b.joint_count() || a.joint_count() == 0 {
        return Err(Error::ShapeMismatch(format!(
            "poses with {} and {} joints",
            a.joint_count(),
            b.joint_count()
        )));
    }
    Ok(())
}

fn dist(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
}

/// Mean Euclidean joint distance.
pub fn mpjpe(pred: &Pose3D, gt: &Pose3D) -> Result<f64> {
    same_skeleton(pred, gt)?;
    Ok(pred.joints.iter().zip(&gt.joints).map(|(a, b)| dist(a, b)).sum::<f64>() / pred.joint_count() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PcpResult {
    /// `None` for limbs of zero ground-truth length, which are skipped.
    pub limbs: Vec<Option<bool>>,
    pub score: f64,
}

/// A limb is correct when both endpoint errors are at most `alpha` times
/// its ground-truth length.
pub fn pcp(pred: &Pose3D, gt: &Pose3D, skeleton: &SkeletonSpec, alpha: f64) -> Result<PcpResult> {
    same_skeleton(pred, gt)?;
    if gt.joint_count() != skeleton.joint_count() {
        return Err(Error::ShapeMismatch("pose does not match skeleton".into()));
    }
    if !(alpha > 0.0) {
        return Err(Error::InvalidInput("alpha must be positive".into()));
    }
    let limbs: Vec<Option<bool>> = skeleton
        .limbs
        .iter()
        .map(|&(a, b)| {
            let len = dist(&gt.joints[a], &gt.joints[b]);
            if len == 0.0 {
                log::warn!("skipping zero-length limb ({a}, {b})");
                return None;
            }
            let tol = alpha * len;
            Some(dist(&pred.joints[a], &gt.joints[a]) <= tol && dist(&pred.joints[b], &gt.joints[b]) <= tol)
        })
        .collect();
    let counted: Vec<bool> = limbs.iter().flatten().copied().collect();
    let score = if counted.is_empty() {
        0.0
    } else {
        counted.iter().filter(|&&c| c).count() as f64 / counted.len() as f64
    };
    Ok(PcpResult { limbs, score })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameError {
    pub frame: usize,
    pub mpjpe: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub per_frame: Vec<FrameError>,
    pub mean: f64,
    pub std: f64,
    /// Frames of the sequence without a prediction (no full window).
    pub excluded: usize,
    pub pcp: Option<f64>,
}

impl EvalReport {
    pub fn from_errors(per_frame: Vec<FrameError>, sequence_len: usize, pcp: Option<f64>) -> Self {
        let n = per_frame.len().max(1) as f64;
        let mean = per_frame.iter().map(|e| e.mpjpe).sum::<f64>() / n;
        let var = per_frame.iter().map(|e| (e.mpjpe - mean).powi(2)).sum::<f64>() / n;
        Self {
            excluded: sequence_len.saturating_sub(per_frame.len()),
            per_frame,
            mean,
            std: var.sqrt(),
            pcp,
        }
    }
}

/// Scores predictions for already extracted descriptors.
pub fn evaluate_descriptors(
    model: &dyn PoseRegressor,
    descriptors: &[Descriptor],
    poses: &[Pose3D],
    skeleton: Option<&SkeletonSpec>,
) -> Result<EvalReport> {
    let gt = center_poses(descriptors, poses)?;
    let xs: Vec<Vec<f32>> = descriptors.iter().map(|d| d.values.clone()).collect();
    let pred = model.predict_batch(&xs)?;
    let mut errors = Vec::with_capacity(pred.len());
    let mut pcp_sum = 0.0;
    for ((d, p), g) in descriptors.iter().zip(&pred).zip(&gt) {
        errors.push(FrameError {
            frame: d.source.expect("checked by center_poses").center,
            mpjpe: mpjpe(p, g)?,
        });
        if let Some(s) = skeleton {
            pcp_sum += pcp(p, g, s, 0.5)?.score;
        }
    }
    let pcp_mean = skeleton.map(|_| pcp_sum / pred.len().max(1) as f64);
    Ok(EvalReport::from_errors(errors, poses.len(), pcp_mean))
}

/// Aligns, describes and predicts every full window of the sequence; frames
/// too close to either end have no window and are excluded.
pub fn evaluate(model: &dyn PoseRegressor, seq: &Sequence, align: Alignment<'_>, cfg: &PipelineConfig) -> Result<EvalReport> {
    cfg.validate()?;
    let poses = seq.poses()?;
    let d = sequence_descriptors(seq, align, cfg)?;
    let skeleton = SkeletonSpec::human17();
    let sk = (poses.first().map(Pose3D::joint_count) == Some(skeleton.joint_count())).then_some(&skeleton);
    evaluate_descriptors(model, &d, poses, sk)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: Variant,
    pub model: String,
    pub mpjpe: f64,
}

/// Trains and evaluates each model kind once per alignment, on identical
/// sequences and seeds.
pub fn ablate_motion(
    train: &Sequence,
    test: &Sequence,
    cfg: &PipelineConfig,
    variants: &[Alignment<'_>],
    kinds: &[ModelKind],
) -> Result<Vec<AblationRow>> {
    cfg.validate()?;
    let mut rows = Vec::new();
    for &align in variants {
        let dtrain = sequence_descriptors(train, align, cfg)?;
        let dtest = sequence_descriptors(test, align, cfg)?;
        for &kind in kinds {
            let model = fit_model(kind, &dtrain, train.poses()?, cfg)?;
            let r = evaluate_descriptors(&model, &dtest, test.poses()?, None)?;
            rows.push(AblationRow {
                variant: align.variant(),
                model: kind.to_string(),
                mpjpe: r.mean,
            });
        }
    }
    Ok(rows)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WindowRow {
    pub window: usize,
    pub mpjpe: f64,
}

/// One train/evaluate round per window size; rows come back sorted by T.
pub fn sweep_window(
    train: &Sequence,
    test: &Sequence,
    cfg: &PipelineConfig,
    windows: &[usize],
    kind: ModelKind,
    align: Alignment<'_>,
) -> Result<Vec<WindowRow>> {
    let mut ts = windows.to_vec();
    ts.sort_unstable();
    ts.dedup();
    if ts.is_empty() {
        return Err(Error::InvalidWindow("no window sizes given".into()));
    }
    let mut rows = Vec::with_capacity(ts.len());
    for t in ts {
        if t > train.len() || t > test.len() {
            return Err(Error::InvalidWindow(format!("window {t} exceeds sequence length")));
        }
        let c = PipelineConfig { window: t, ..cfg.clone() };
        c.validate()?;
        let dtrain = sequence_descriptors(train, align, &c)?;
        let dtest = sequence_descriptors(test, align, &c)?;
        let model = fit_model(kind, &dtrain, train.poses()?, &c)?;
        rows.push(WindowRow {
            window: t,
            mpjpe: evaluate_descriptors(&model, &dtest, test.poses()?, None)?.mean,
        });
    }
    Ok(rows)
}

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut s = String::from("variant,model,mpjpe\n");
    for r in rows {
        s.push_str(&format!("{},{},{:.2}\n", r.variant, r.model, r.mpjpe));
    }
    s
}

pub fn window_csv(rows: &[WindowRow]) -> String {
    let mut s = String::from("T,mpjpe\n");
    for r in rows {
        s.push_str(&format!("{},{:.2}\n", r.window, r.mpjpe));
    }
    s
}

pub fn report_csv(r: &EvalReport) -> String {
    let mut s = String::from("frame,mpjpe\n");
    for e in &r.per_frame {
        s.push_str(&format!("{},{:.2}\n", e.frame, e.mpjpe));
    }
    s
}

#[derive(Serialize)]
struct Envelope<'a, T: Serialize> {
    config_hash: String,
    config: &'a PipelineConfig,
    result: &'a T,
}

/// Writes `<stem>-<hash>.csv` and `<stem>-<hash>.json` (result plus the
/// resolved config) into `dir`; returns both paths.
pub fn write_report<T: Serialize>(dir: &Path, stem: &str, cfg: &PipelineConfig, csv: &str, result: &T) -> Result<(PathBuf, PathBuf)> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let hash = cfg.hash();
    let csv_path = dir.join(format!("{stem}-{hash}.csv"));
    let json_path = dir.join(format!("{stem}-{hash}.json"));
    std::fs::write(&csv_path, csv).map_err(|e| Error::io(&csv_path, e))?;
    let env = Envelope {
        config_hash: hash,
        config: cfg,
        result,
    };
    let mut json = serde_json::to_vec_pretty(&env)?;
    json.push(b'\n');
    std::fs::write(&json_path, json).map_err(|e| Error::io(&json_path, e))?;
    Ok((csv_path, json_path))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{gen_sequence, SynthConfig};
    use proptest::prelude::*;

    fn pose(j: &[[f64; 3]]) -> Pose3D {
        Pose3D::new(j.to_vec()).unwrap()
    }

    #[test]
    fn mpjpe_examples() {
        let a = pose(&[[1.0, 2.0, 3.0], [4.0, 5.0, 6.0]]);
        assert_eq!(mpjpe(&a, &a).unwrap(), 0.0);
        let b = pose(&[[4.0, 2.0, 7.0], [7.0, 5.0, 10.0]]);
        assert_eq!(mpjpe(&a, &b).unwrap(), 5.0);
        let p = pose(&[[0.0; 3], [0.0, 3.0, 4.0]]);
        assert_eq!(mpjpe(&p, &Pose3D::zeros(2)).unwrap(), 2.5);
        assert!(mpjpe(&p, &Pose3D::zeros(3)).is_err());
    }

    fn two_limbs() -> SkeletonSpec {
        SkeletonSpec::new(vec!["a".into(), "b".into(), "c".into()], vec![0, 0, 1], vec![(0, 1), (1, 2)]).unwrap()
    }

    #[test]
    fn pcp_examples() {
        let sk = two_limbs();
        let gt = pose(&[[0.0; 3], [10.0, 0.0, 0.0], [20.0, 0.0, 0.0]]);
        assert_eq!(pcp(&gt, &gt, &sk, 0.5).unwrap().score, 1.0);
        // endpoint error exactly 0.5 * 10
        let edge = pose(&[[0.0; 3], [10.0, 5.0, 0.0], [20.0, 0.0, 0.0]]);
        assert_eq!(pcp(&edge, &gt, &sk, 0.5).unwrap().score, 1.0);
        let half = pose(&[[0.0; 3], [10.0, 0.0, 0.0], [20.0, 5.1, 0.0]]);
        let r = pcp(&half, &gt, &sk, 0.5).unwrap();
        assert_eq!(r.limbs, vec![Some(true), Some(false)]);
        assert_eq!(r.score, 0.5);
        let degenerate = pose(&[[0.0; 3], [0.0; 3], [20.0, 0.0, 0.0]]);
        let r = pcp(&degenerate, &degenerate, &sk, 0.5).unwrap();
        assert_eq!(r.limbs[0], None);
        assert_eq!(r.score, 1.0);
        assert!(pcp(&gt, &gt, &sk, 0.0).is_err());
    }

    struct Truth(Vec<Pose3D>);
    impl PoseRegressor for Truth {
        fn predict(&self, _: &[f32]) -> Result<Pose3D> {
            unreachable!()
        }
        fn predict_batch(&self, d: &[Vec<f32>]) -> Result<Vec<Pose3D>> {
            // descriptors arrive in center order, starting at T/2 - 1
            Ok((0..d.len()).map(|i| self.0[i + 11].clone()).collect())
        }
    }

    struct Zero;
    impl PoseRegressor for Zero {
        fn predict(&self, _: &[f32]) -> Result<Pose3D> {
            Ok(Pose3D::zeros(17))
        }
    }

    #[test]
    fn evaluate_with_stub_models() {
        let s = gen_sequence(&SynthConfig {
            frames: 50,
            ..Default::default()
        })
        .unwrap();
        let cfg = PipelineConfig::desk();
        let truth = Truth(s.poses().unwrap().to_vec());
        let r = evaluate(&truth, &s, Alignment::Boxes, &cfg).unwrap();
        assert_eq!(r.mean, 0.0);
        assert_eq!(r.per_frame.len(), 50 - 24 + 1);
        assert_eq!(r.per_frame[0].frame, 11);
        assert_eq!(r.pcp, Some(1.0));

        let r = evaluate(&Zero, &s, Alignment::Boxes, &cfg).unwrap();
        let poses = &s.poses().unwrap()[11..=37];
        let expect = poses
            .iter()
            .map(|p| p.joints.iter().map(|j| dist(j, &[0.0; 3])).sum::<f64>() / 17.0)
            .sum::<f64>()
            / poses.len() as f64;
        assert!((r.mean - expect).abs() < 1e-9);
        assert_eq!(r, evaluate(&Zero, &s, Alignment::Boxes, &cfg).unwrap());

        let no_poses = Sequence { poses: None, ..s };
        assert!(evaluate(&Zero, &no_poses, Alignment::Boxes, &cfg).is_err());
    }

    #[test]
    fn report_statistics() {
        let e = |f, m| FrameError { frame: f, mpjpe: m };
        let r = EvalReport::from_errors(vec![e(3, 1.0), e(4, 3.0)], 6, None);
        assert_eq!((r.mean, r.std, r.excluded), (2.0, 1.0, 4));
        assert_eq!(report_csv(&r), "frame,mpjpe\n3,1.00\n4,3.00\n");
    }

    #[test]
    fn csv_formats() {
        let rows = vec![
            AblationRow {
                variant: Variant::Stv,
                model: "KRR".into(),
                mpjpe: 12.345,
            },
            AblationRow {
                variant: Variant::Rstv,
                model: "KRR".into(),
                mpjpe: 10.0,
            },
        ];
        assert_eq!(ablation_csv(&rows), "variant,model,mpjpe\nSTV,KRR,12.35\nRSTV,KRR,10.00\n");
        let w = vec![WindowRow { window: 4, mpjpe: 1.0 }];
        assert_eq!(window_csv(&w), "T,mpjpe\n4,1.00\n");
        let dir = tempfile::tempdir().unwrap();
        let cfg = PipelineConfig::desk();
        let (c, j) = write_report(dir.path(), "ablation", &cfg, &ablation_csv(&rows), &rows).unwrap();
        assert!(c.file_name().unwrap().to_str().unwrap().contains(&cfg.hash()));
        let v: serde_json::Value = serde_json::from_slice(&std::fs::read(j).unwrap()).unwrap();
        assert_eq!(v["config_hash"], cfg.hash());
        assert_eq!(v["result"][0]["variant"], "STV");
    }

    #[test]
    fn sweep_rejects_bad_windows() {
        let s = gen_sequence(&SynthConfig {
            frames: 48,
            ..Default::default()
        })
        .unwrap();
        let cfg = PipelineConfig::desk();
        assert!(sweep_window(&s, &s, &cfg, &[], ModelKind::Krr, Alignment::Boxes).is_err());
        assert!(sweep_window(&s, &s, &cfg, &[6], ModelKind::Krr, Alignment::Boxes).is_err());
        assert!(sweep_window(&s, &s, &cfg, &[64], ModelKind::Krr, Alignment::Boxes).is_err());
    }

    fn arb_pose(d: usize) -> impl Strategy<Value = Pose3D> {
        proptest::collection::vec(proptest::array::uniform3(-500.0f64..500.0), d).prop_map(|j| Pose3D::new(j).unwrap())
    }

    proptest! {
        #[test]
        fn mpjpe_is_a_metric(a in arb_pose(5), b in arb_pose(5), c in arb_pose(5)) {
            let ab = mpjpe(&a, &b).unwrap();
            prop_assert!(ab >= 0.0);
            prop_assert_eq!(mpjpe(&a, &a).unwrap(), 0.0);
            prop_assert!((ab - mpjpe(&b, &a).unwrap()).abs() < 1e-9);
            prop_assert!(ab <= mpjpe(&a, &c).unwrap() + mpjpe(&c, &b).unwrap() + 1e-9);
        }

        #[test]
        fn pcp_scale_invariant(a in arb_pose(17), b in arb_pose(17), k in 0.1f64..10.0) {
            let sk = SkeletonSpec::human17();
            let scale = |p: &Pose3D| Pose3D::new(p.joints.iter().map(|j| [j[0] * k, j[1] * k, j[2] * k]).collect()).unwrap();
            let r1 = pcp(&a, &b, &sk, 0.5).unwrap();
            let r2 = pcp(&scale(&a), &scale(&b), &sk, 0.5).unwrap();
            prop_assert_eq!(r1.score, r2.score);
        }
    }
}
