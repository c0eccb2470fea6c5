//! Assembling body, hand and face estimates into one full-body parameter set.
//!
//! The full-body joint layout is body joints `0..22`, face joints `22..25`
//! (jaw, left eye, right eye), left fingers `25..40` and right fingers
//! `40..55`. Rotations compose child-on-the-right: `global = parent * local`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::camera::WeakPerspectiveCamera;
use crate::error::{check_len, Error, Result};
use crate::kinematics::{forward_kinematics, shape_blend, ArticulatedModel, KinematicTree};
use crate::rotmath::{compensation_angle, swing_twist, Mat3, Quaternion, RotationValue, TwistRange, Vec3};
use crate::toy::{BODY_JOINTS, FULLBODY_JOINTS, LEFT_ELBOW, LEFT_WRIST, RIGHT_ELBOW, RIGHT_WRIST};

pub const FACE_JOINTS: usize = 3;
pub const FINGER_JOINTS: usize = 15;
pub const FACE_START: usize = BODY_JOINTS;
pub const FINGER_START: usize = FACE_START + FACE_JOINTS;
pub const DEFAULT_VIS_THRESHOLD: f64 = 0.5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Side {
    Left,
    Right,
}

impl Side {
    pub const BOTH: [Side; 2] = [Side::Left, Side::Right];

    pub fn name(self) -> &'static str {
        match self {
            Side::Left => "left",
            Side::Right => "right",
        }
    }

    pub fn elbow(self) -> usize {
        match self {
            Side::Left => LEFT_ELBOW,
            Side::Right => RIGHT_ELBOW,
        }
    }

    pub fn wrist(self) -> usize {
        match self {
            Side::Left => LEFT_WRIST,
            Side::Right => RIGHT_WRIST,
        }
    }

    fn index(self) -> usize {
        self as usize
    }

    fn finger_start(self) -> usize {
        FINGER_START + self.index() * FINGER_JOINTS
    }
}

/// What a hand expert predicts for one hand.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HandEstimate {
    /// Global orientation of the hand root.
    pub global_orient: RotationValue,
    /// Finger rotations relative to their parents, in layout order.
    pub fingers: Vec<RotationValue>,
    /// Confidence in `[0, 1]` that the hand is visible.
    pub visibility: f64,
}

impl HandEstimate {
    pub fn mean(global_orient: RotationValue) -> Self {
        Self {
            global_orient,
            fingers: vec![RotationValue::identity(); FINGER_JOINTS],
            visibility: 1.0,
        }
    }
}

/// Outputs of the body, hand and face experts.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PartEstimates {
    pub body_theta: Vec<RotationValue>,
    pub beta: Vec<f64>,
    pub camera: WeakPerspectiveCamera,
    /// Left then right.
    pub hands: [HandEstimate; 2],
    pub face_theta: Vec<RotationValue>,
    pub psi: Vec<f64>,
}

impl PartEstimates {
    pub fn validate(&self) -> Result<()> {
        check_len("body theta", BODY_JOINTS, self.body_theta.len())?;
        check_len("face theta", FACE_JOINTS, self.face_theta.len())?;
        for h in &self.hands {
            check_len("finger theta", FINGER_JOINTS, h.fingers.len())?;
            if !(0.0..=1.0).contains(&h.visibility) {
                return Err(Error::Config(format!(
                    "hand visibility {} outside [0, 1]",
                    h.visibility
                )));
            }
        }
        Ok(())
    }

    pub fn hand(&self, side: Side) -> &HandEstimate {
        &self.hands[side.index()]
    }
}

/// Full-body parameters in the 55-joint layout.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FullBodyParams {
    pub theta_fb: Vec<RotationValue>,
    pub beta_fb: Vec<f64>,
    pub psi: Vec<f64>,
    pub camera: WeakPerspectiveCamera,
}

/// The pieces of a [`FullBodyParams`] split back per expert.
#[derive(Clone, Debug, PartialEq)]
pub struct Parts {
    pub body: Vec<RotationValue>,
    pub face: Vec<RotationValue>,
    pub fingers: [Vec<RotationValue>; 2],
}

pub fn assemble(
    body: &[RotationValue],
    fingers: [&[RotationValue]; 2],
    face: &[RotationValue],
    beta: &[f64],
    psi: &[f64],
    camera: WeakPerspectiveCamera,
) -> Result<FullBodyParams> {
    check_len("body theta", BODY_JOINTS, body.len())?;
    check_len("face theta", FACE_JOINTS, face.len())?;
    let mut theta_fb = Vec::with_capacity(FULLBODY_JOINTS);
    theta_fb.extend_from_slice(body);
    theta_fb.extend_from_slice(face);
    for f in fingers {
        check_len("finger theta", FINGER_JOINTS, f.len())?;
        theta_fb.extend_from_slice(f);
    }
    Ok(FullBodyParams {
        theta_fb,
        beta_fb: beta.to_vec(),
        psi: psi.to_vec(),
        camera,
    })
}

pub fn disassemble(fb: &FullBodyParams) -> Result<Parts> {
    check_len("full-body theta", FULLBODY_JOINTS, fb.theta_fb.len())?;
    let t = &fb.theta_fb;
    let hand = |s: Side| t[s.finger_start()..s.finger_start() + FINGER_JOINTS].to_vec();
    Ok(Parts {
        body: t[..BODY_JOINTS].to_vec(),
        face: t[FACE_START..FINGER_START].to_vec(),
        fingers: [hand(Side::Left), hand(Side::Right)],
    })
}

fn chain_global(tree: &KinematicTree, theta: &[Mat3], joint: usize) -> Mat3 {
    tree.chain(joint).iter().fold(Mat3::identity(), |g, &j| g * theta[j])
}

/// Wrist rotation relative to `elbow` that makes the wrist's global orientation equal `hand_global`.
pub fn copy_paste_wrist(theta: &[Mat3], tree: &KinematicTree, elbow: usize, hand_global: &Mat3) -> Result<Mat3> {
    check_len("theta", tree.len(), theta.len())?;
    if elbow >= tree.len() {
        return Err(Error::InvalidModel(format!(
            "elbow joint {elbow} not in a {}-joint tree",
            tree.len()
        )));
    }
    Ok(chain_global(tree, theta, elbow).transpose() * hand_global)
}

/// Result of moving excess wrist twist into the elbow.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TwistCompensation {
    pub elbow: Mat3,
    pub wrist: Mat3,
    pub alpha_tw: f64,
    pub alpha_cp: f64,
    pub singular: bool,
    pub degenerate_axis: bool,
}

/// Applies `elbow * cp` and `cp^-1 * wrist`, with `cp` a rotation about `bone`
/// (the elbow-to-wrist vector in the elbow frame) by the compensation angle.
pub fn compensate_twist(elbow: &Mat3, wrist: &Mat3, bone: &Vec3, range: &TwistRange) -> Result<TwistCompensation> {
    let unchanged = TwistCompensation {
        elbow: *elbow,
        wrist: *wrist,
        alpha_tw: 0.0,
        alpha_cp: 0.0,
        singular: false,
        degenerate_axis: false,
    };
    if !(bone.norm() > 1e-12) {
        return Ok(TwistCompensation {
            degenerate_axis: true,
            ..unchanged
        });
    }
    let d = swing_twist(&Quaternion::from_matrix(wrist), bone)?;
    if d.singular {
        return Ok(TwistCompensation {
            singular: true,
            ..unchanged
        });
    }
    let alpha_cp = compensation_angle(d.twist_angle, range);
    if alpha_cp == 0.0 {
        return Ok(TwistCompensation {
            alpha_tw: d.twist_angle,
            ..unchanged
        });
    }
    let cp = Quaternion::from_axis_angle(&d.twist_axis, alpha_cp)?.to_matrix();
    Ok(TwistCompensation {
        elbow: elbow * cp,
        wrist: cp.transpose() * wrist,
        alpha_tw: d.twist_angle,
        alpha_cp,
        singular: false,
        degenerate_axis: false,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Strategy {
    CopyPaste,
    Adaptive,
}

impl Strategy {
    pub fn name(self) -> &'static str {
        match self {
            Strategy::CopyPaste => "copy-paste",
            Strategy::Adaptive => "adaptive",
        }
    }
}

impl std::str::FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "copy-paste" => Ok(Strategy::CopyPaste),
            "adaptive" => Ok(Strategy::Adaptive),
            other => Err(Error::Config(format!("unknown strategy {other:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum HandMode {
    CopyPaste,
    Adaptive,
    BodyOnlyGated,
}

impl HandMode {
    pub fn name(self) -> &'static str {
        match self {
            HandMode::CopyPaste => "copy-paste",
            HandMode::Adaptive => "adaptive",
            HandMode::BodyOnlyGated => "body-only-gated",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HandReport {
    pub side: Side,
    pub mode: HandMode,
    /// Wrist twist before compensation, radians; absent unless adaptive ran.
    pub alpha_tw: Option<f64>,
    /// Compensation moved into the elbow, radians; absent unless adaptive ran.
    pub alpha_cp: Option<f64>,
    pub singular: bool,
    pub degenerate_axis: bool,
    pub elbow: RotationValue,
    pub wrist: RotationValue,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IntegrationReport {
    pub strategy: Strategy,
    pub hands: Vec<HandReport>,
}

impl IntegrationReport {
    /// Flat `key = value` pairs; angles in degrees, rotations as row-major matrices.
    pub fn to_key_values(&self) -> Result<Vec<(String, String)>> {
        let mut kv = vec![("strategy".to_string(), self.strategy.name().to_string())];
        for h in &self.hands {
            let p = h.side.name();
            let deg = |a: Option<f64>| a.map_or("none".to_string(), |a| format!("{:.12}", a.to_degrees()));
            kv.push((format!("{p}.mode"), h.mode.name().into()));
            kv.push((format!("{p}.alpha_tw_deg"), deg(h.alpha_tw)));
            kv.push((format!("{p}.alpha_cp_deg"), deg(h.alpha_cp)));
            kv.push((format!("{p}.singular"), h.singular.to_string()));
            kv.push((format!("{p}.degenerate_axis"), h.degenerate_axis.to_string()));
            for (name, r) in [("elbow", &h.elbow), ("wrist", &h.wrist)] {
                let m = r.to_matrix()?;
                let s: Vec<String> = m.transpose().iter().map(|x| format!("{x:.17e}")).collect();
                kv.push((format!("{p}.{name}"), s.join(" ")));
            }
        }
        Ok(kv)
    }
}

/// Estimates after visibility gating, with the mode chosen per hand.
#[derive(Clone, Debug, PartialEq)]
pub struct GatedEstimates {
    pub estimates: PartEstimates,
    pub gated: [bool; 2],
}

/// Fraction of visible keypoints, used as a pseudo visibility label.
pub fn keypoint_visibility(visible: &[bool]) -> f64 {
    if visible.is_empty() {
        return 0.0;
    }
    visible.iter().filter(|v| **v).count() as f64 / visible.len() as f64
}

/// Hands with confidence below `threshold` fall back to the body expert's
/// wrist and the mean (identity) finger pose.
pub fn visibility_gate(estimates: &PartEstimates, threshold: f64) -> Result<GatedEstimates> {
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(Error::Config(format!(
            "visibility threshold must lie in (0, 1), got {threshold}"
        )));
    }
    estimates.validate()?;
    let mut out = estimates.clone();
    let mut gated = [false; 2];
    for side in Side::BOTH {
        if estimates.hand(side).visibility < threshold {
            gated[side.index()] = true;
            out.hands[side.index()].fingers = vec![RotationValue::identity(); FINGER_JOINTS];
        }
    }
    Ok(GatedEstimates { estimates: out, gated })
}

fn check_fullbody(model: &ArticulatedModel) -> Result<()> {
    check_len("full-body joints", FULLBODY_JOINTS, model.num_joints())?;
    for side in Side::BOTH {
        if model.tree.parent(side.wrist()) != Some(side.elbow()) {
            return Err(Error::InvalidModel(format!(
                "{} wrist is not a child of the elbow",
                side.name()
            )));
        }
    }
    Ok(())
}

/// Combines gated part estimates into full-body parameters with `strategy`.
pub fn integrate(
    model: &ArticulatedModel,
    gated: &GatedEstimates,
    strategy: Strategy,
    range: &TwistRange,
) -> Result<(FullBodyParams, IntegrationReport)> {
    check_fullbody(model)?;
    let est = &gated.estimates;
    est.validate()?;
    let mut theta: Vec<Mat3> = est.body_theta.iter().map(|r| r.to_matrix()).collect::<Result<_>>()?;
    theta.resize(FULLBODY_JOINTS, Mat3::identity());
    let body_tree = KinematicTree::new(
        model.tree.parents()[..BODY_JOINTS].to_vec(),
        model.tree.names()[..BODY_JOINTS].to_vec(),
    )?;
    let (_, rest) = shape_blend(model, &est.beta, &est.psi)?;
    let mut reports = Vec::with_capacity(2);
    let mut body = est.body_theta.clone();
    for side in Side::BOTH {
        let (e, w) = (side.elbow(), side.wrist());
        if gated.gated[side.index()] {
            reports.push(HandReport {
                side,
                mode: HandMode::BodyOnlyGated,
                alpha_tw: None,
                alpha_cp: None,
                singular: false,
                degenerate_axis: false,
                elbow: body[e],
                wrist: body[w],
            });
            continue;
        }
        let hand_global = est.hand(side).global_orient.to_matrix()?;
        let wrist = copy_paste_wrist(&theta[..BODY_JOINTS], &body_tree, e, &hand_global)?;
        theta[w] = wrist;
        let report = match strategy {
            Strategy::CopyPaste => {
                body[w] = RotationValue::Matrix(wrist);
                HandReport {
                    side,
                    mode: HandMode::CopyPaste,
                    alpha_tw: None,
                    alpha_cp: None,
                    singular: false,
                    degenerate_axis: false,
                    elbow: body[e],
                    wrist: body[w],
                }
            }
            Strategy::Adaptive => {
                let posed = forward_kinematics(&body_tree, &theta[..BODY_JOINTS], &rest[..BODY_JOINTS])?;
                let bone =
                    posed.global_rotations[e].transpose() * (posed.joint_positions[w] - posed.joint_positions[e]);
                let c = compensate_twist(&theta[e], &wrist, &bone, range)?;
                if c.alpha_cp != 0.0 {
                    theta[e] = c.elbow;
                    body[e] = RotationValue::Matrix(c.elbow);
                }
                theta[w] = c.wrist;
                body[w] = RotationValue::Matrix(c.wrist);
                let ran = !(c.singular || c.degenerate_axis);
                HandReport {
                    side,
                    mode: HandMode::Adaptive,
                    alpha_tw: ran.then_some(c.alpha_tw),
                    alpha_cp: ran.then_some(c.alpha_cp),
                    singular: c.singular,
                    degenerate_axis: c.degenerate_axis,
                    elbow: body[e],
                    wrist: body[w],
                }
            }
        };
        reports.push(report);
    }
    let fb = assemble(
        &body,
        [&est.hands[0].fingers, &est.hands[1].fingers],
        &est.face_theta,
        &est.beta,
        &est.psi,
        est.camera,
    )?;
    Ok((
        fb,
        IntegrationReport {
            strategy,
            hands: reports,
        },
    ))
}

/// Gates with `threshold` then integrates.
pub fn adaptive_integrate(
    model: &ArticulatedModel,
    estimates: &PartEstimates,
    range: &TwistRange,
    threshold: f64,
) -> Result<(FullBodyParams, IntegrationReport)> {
    integrate(
        model,
        &visibility_gate(estimates, threshold)?,
        Strategy::Adaptive,
        range,
    )
}

/// Seeded estimates whose hand orientations carry wrist twists spread over
/// `[-150, 150]` degrees about the forearm, so that some exceed the default range.
pub fn synthetic_estimates(model: &ArticulatedModel, seed: u64) -> Result<PartEstimates> {
    check_fullbody(model)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let small = |rng: &mut ChaCha8Rng, std: f64| {
        let r = Vec3::new(
            rng.random_range(-std..std),
            rng.random_range(-std..std),
            rng.random_range(-std..std),
        );
        Quaternion::from_rotation_vector(&r).to_matrix()
    };
    let body: Vec<Mat3> = (0..BODY_JOINTS).map(|_| small(&mut rng, 0.4)).collect();
    let beta: Vec<f64> = (0..model.num_betas()).map(|_| rng.random_range(-1.0..1.0)).collect();
    let psi: Vec<f64> = (0..model.num_expressions())
        .map(|_| rng.random_range(-1.0..1.0))
        .collect();
    let tree = KinematicTree::new(
        model.tree.parents()[..BODY_JOINTS].to_vec(),
        model.tree.names()[..BODY_JOINTS].to_vec(),
    )?;
    let (_, rest) = shape_blend(model, &beta, &psi)?;
    let mut hands = Vec::with_capacity(2);
    for side in Side::BOTH {
        let bone = rest[side.wrist()] - rest[side.elbow()];
        let twist = Quaternion::from_axis_angle(&bone, rng.random_range(-150f64..150.0).to_radians())?.to_matrix();
        let wrist = small(&mut rng, 0.3) * twist;
        let hand_global = chain_global(&tree, &body, side.elbow()) * wrist;
        hands.push(HandEstimate {
            global_orient: RotationValue::Matrix(hand_global),
            fingers: (0..FINGER_JOINTS)
                .map(|_| RotationValue::Matrix(small(&mut rng, 0.3)))
                .collect(),
            visibility: rng.random_range(0.0..1.0),
        });
    }
    let mut body: Vec<RotationValue> = body.into_iter().map(RotationValue::Matrix).collect();
    for side in Side::BOTH {
        // the body expert's own wrist guess is a rough, twist-free estimate
        body[side.wrist()] = RotationValue::Matrix(small(&mut rng, 0.2));
    }
    Ok(PartEstimates {
        body_theta: body,
        beta,
        camera: WeakPerspectiveCamera::default(),
        hands: [hands[0].clone(), hands[1].clone()],
        face_theta: (0..FACE_JOINTS)
            .map(|_| RotationValue::Matrix(small(&mut rng, 0.2)))
            .collect(),
        psi,
    })
}

/// Posed joint positions and global rotations of a full-body parameter set.
pub fn fullbody_joints(model: &ArticulatedModel, fb: &FullBodyParams) -> Result<(Vec<Vec3>, Vec<Mat3>)> {
    let theta: Vec<Mat3> = fb.theta_fb.iter().map(|r| r.to_matrix()).collect::<Result<_>>()?;
    let (_, rest) = shape_blend(model, &fb.beta_fb, &fb.psi)?;
    let posed = forward_kinematics(&model.tree, &theta, &rest)?;
    Ok((posed.joint_positions, posed.global_rotations))
}
