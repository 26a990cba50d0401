//! Path-integral attribution on split networks.
//!
//! Every method here attributes `F(A) - F(A')` over the features `A` of a
//! [`SplitView`], where `F` is the tail restricted to one target output.
//! Integrated gradients is the general case; gradient×input, first-order
//! Taylor, LayerCAM and ODAM are single-step instances of it with a
//! particular baseline and sampling point.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Model, SplitView, Target};
use crate::report::AttributionReport;
use crate::tensor::Tensor;

/// Riemann sampling rule along the straight path from `A'` to `A`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scheme {
    /// Points `s/m` for `s = 1..=m`.
    Right,
    /// Points `s/m` for `s = 0..m`.
    Left,
}

impl fmt::Display for Scheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Scheme::Right => "right",
            Scheme::Left => "left",
        })
    }
}

impl FromStr for Scheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "right" => Ok(Scheme::Right),
            "left" => Ok(Scheme::Left),
            _ => Err(Error::InvalidArgument(format!("unknown scheme `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PathSpec {
    steps: usize,
    scheme: Scheme,
}

impl PathSpec {
    pub const DEFAULT_STEPS: usize = 256;
    pub const FIGURE_STEPS: usize = 500;

    pub fn new(steps: usize, scheme: Scheme) -> Result<Self> {
        if steps == 0 {
            return Err(Error::InvalidArgument("integration steps must be >= 1".into()));
        }
        Ok(Self { steps, scheme })
    }

    pub fn right(steps: usize) -> Self {
        Self::new(steps, Scheme::Right).expect("steps >= 1")
    }

    pub fn left(steps: usize) -> Self {
        Self::new(steps, Scheme::Left).expect("steps >= 1")
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn scheme(&self) -> Scheme {
        self.scheme
    }

    pub fn with_steps(self, steps: usize) -> Result<Self> {
        Self::new(steps, self.scheme)
    }

    /// Step indices `s`, each standing for the point `A' + (s/m)(A - A')`.
    pub fn step_indices(&self) -> std::ops::Range<usize> {
        match self.scheme {
            Scheme::Right => 1..self.steps + 1,
            Scheme::Left => 0..self.steps,
        }
    }
}

impl Default for PathSpec {
    fn default() -> Self {
        Self::right(Self::DEFAULT_STEPS)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Ig,
    GradInput,
    Taylor,
    /// Original LayerCAM: ReLU on gradients and on the collapsed map.
    Layercam,
    /// LayerCAM keeping negative gradients and without the final ReLU.
    LayercamMod,
    Odam,
    OdamCombined,
}

impl Method {
    pub const ALL: [Method; 6] = [
        Method::Ig,
        Method::GradInput,
        Method::Taylor,
        Method::Layercam,
        Method::LayercamMod,
        Method::Odam,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            Method::Ig => "ig",
            Method::GradInput => "grad-input",
            Method::Taylor => "taylor",
            Method::Layercam => "layercam",
            Method::LayercamMod => "layercam-mod",
            Method::Odam => "odam",
            Method::OdamCombined => "odam-combined",
        }
    }

    /// Whether `steps` affects the result.
    pub fn uses_steps(&self) -> bool {
        matches!(self, Method::Ig)
    }

    /// Methods whose baseline is the all-zero feature map regardless of input.
    pub fn has_implicit_zero_features(&self) -> bool {
        matches!(
            self,
            Method::GradInput | Method::Layercam | Method::LayercamMod | Method::Odam
        )
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown method `{s}`")))
    }
}

/// Where the feature baseline `A'` came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BaselineProvenance {
    /// `A' = head(x')` for an input-space baseline `x'`.
    InputDerived,
    /// A feature tensor supplied directly; no input-level baseline exists.
    RawFeature,
}

impl BaselineProvenance {
    /// Feature-level baselines on an identity head are input baselines.
    fn for_view(view: &SplitView<'_>) -> Self {
        if view.split_index() == 0 {
            BaselineProvenance::InputDerived
        } else {
            BaselineProvenance::RawFeature
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributionMeta {
    pub method: Method,
    pub scheme: Option<Scheme>,
    pub steps: Option<usize>,
    pub split_index: usize,
    pub target: Target,
    /// Targets merged into this map (only for combined maps).
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub sources: Vec<Target>,
    pub baseline: BaselineProvenance,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub notes: Vec<String>,
}

pub const NO_INPUT_BASELINE_NOTE: &str = "no input-level baseline";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributionMap {
    /// Signed per-element contributions, shaped like the features.
    pub feature_map: Tensor,
    /// Channel (leading-axis) sum of `feature_map`, followed by a ReLU only
    /// in original-LayerCAM mode. Rank-1 features have no channel axis and
    /// are not collapsed.
    pub collapsed: Tensor,
    pub meta: AttributionMeta,
}

impl AttributionMap {
    fn from_features(feature_map: Tensor, meta: AttributionMeta) -> Self {
        let collapsed = feature_map.sum_leading_axis();
        let mut map = Self {
            feature_map,
            collapsed,
            meta,
        };
        if map.meta.baseline == BaselineProvenance::RawFeature {
            map.note(NO_INPUT_BASELINE_NOTE);
        }
        map
    }

    /// Total attributed output change: the sum of the final map.
    pub fn attribution_sum(&self) -> f64 {
        self.collapsed.sum()
    }

    pub fn note(&mut self, note: impl Into<String>) {
        let note = note.into();
        if !self.meta.notes.contains(&note) {
            self.meta.notes.push(note);
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("map serialization cannot fail")
    }
}

fn check_features(view: &SplitView<'_>, what: &str, t: &Tensor) -> Result<()> {
    if t.shape() != view.feature_shape() {
        return Err(Error::shape(what, view.feature_shape(), t.shape()));
    }
    Ok(())
}

fn gradient_at(view: &SplitView<'_>, point: &Tensor, target: Target, context: &str) -> Result<Tensor> {
    let g = view.tail_gradient(point, target)?;
    g.ensure_finite(context)?;
    Ok(g)
}

/// `A' + (s/m)(A - A')`, landing exactly on `A'` and `A` at the endpoints.
fn path_point(base: &Tensor, end: &Tensor, s: usize, m: usize) -> Tensor {
    if s == 0 {
        return base.clone();
    }
    if s == m {
        return end.clone();
    }
    let t = s as f64 / m as f64;
    base.zip_map(end, |b, e| b + t * (e - b))
        .expect("shapes checked")
}

/// Riemann-sum integrated gradients of the tail from `a_base` to `a`.
///
/// The mean gradient is accumulated relative to the first sampled gradient,
/// so a constant gradient (affine tail) yields bit-identical attributions
/// for every step count and scheme.
pub fn integrated_gradients(
    view: &SplitView<'_>,
    a: &Tensor,
    a_base: &Tensor,
    path: PathSpec,
    target: Target,
) -> Result<AttributionMap> {
    check_features(view, "features", a)?;
    check_features(view, "feature baseline", a_base)?;
    let m = path.steps();
    let mut reference: Option<Tensor> = None;
    let mut shifted = vec![0.0; a.len()];
    for s in path.step_indices() {
        let point = path_point(a_base, a, s, m);
        let g = gradient_at(view, &point, target, &format!("gradient at path step {s}/{m}"))?;
        match &reference {
            None => reference = Some(g),
            Some(r) => {
                for ((acc, gv), rv) in shifted.iter_mut().zip(g.data()).zip(r.data()) {
                    *acc += gv - rv;
                }
            }
        }
    }
    let reference = reference.expect("at least one step");
    let mut feature_map = a.clone();
    for (i, out) in feature_map.data_mut().iter_mut().enumerate() {
        let mean_grad = reference.data()[i] + shifted[i] / m as f64;
        *out = (a.data()[i] - a_base.data()[i]) * mean_grad;
    }
    Ok(AttributionMap::from_features(
        feature_map,
        AttributionMeta {
            method: Method::Ig,
            scheme: Some(path.scheme()),
            steps: Some(m),
            split_index: view.split_index(),
            target,
            sources: Vec::new(),
            baseline: BaselineProvenance::for_view(view),
            notes: Vec::new(),
        },
    ))
}

fn single_step_meta(view: &SplitView<'_>, method: Method, target: Target) -> AttributionMeta {
    AttributionMeta {
        method,
        scheme: None,
        steps: Some(1),
        split_index: view.split_index(),
        target,
        sources: Vec::new(),
        baseline: BaselineProvenance::for_view(view),
        notes: Vec::new(),
    }
}

/// `A ⊙ dF/dA` at `A`: one right-point step from the zero feature map.
pub fn gradient_times_input(view: &SplitView<'_>, a: &Tensor, target: Target) -> Result<AttributionMap> {
    check_features(view, "features", a)?;
    let g = gradient_at(view, a, target, "gradient at features")?;
    let feature_map = a.zip_map(&g, |x, d| x * d)?;
    Ok(AttributionMap::from_features(
        feature_map,
        single_step_meta(view, Method::GradInput, target),
    ))
}

/// `(A - A') ⊙ dF/dA` at `A'`: one left-point step.
pub fn taylor_first_order(
    view: &SplitView<'_>,
    a: &Tensor,
    a_base: &Tensor,
    target: Target,
) -> Result<AttributionMap> {
    check_features(view, "features", a)?;
    check_features(view, "feature baseline", a_base)?;
    let g = gradient_at(view, a_base, target, "gradient at baseline")?;
    let diff = a.zip_map(a_base, |x, b| x - b)?;
    let feature_map = diff.zip_map(&g, |d, gv| d * gv)?;
    let mut meta = single_step_meta(view, Method::Taylor, target);
    meta.scheme = Some(Scheme::Left);
    Ok(AttributionMap::from_features(feature_map, meta))
}

/// LayerCAM. `keep_negative = false, final_relu = true` is the original
/// method; `keep_negative = true, final_relu = false` is the modified one,
/// which coincides with gradient×input on the features.
pub fn layercam(
    view: &SplitView<'_>,
    a: &Tensor,
    target: Target,
    keep_negative: bool,
    final_relu: bool,
) -> Result<AttributionMap> {
    check_features(view, "features", a)?;
    let g = gradient_at(view, a, target, "gradient at features")?;
    let weights = if keep_negative { g } else { g.map(|v| v.max(0.0)) };
    let feature_map = weights.zip_map(a, |w, x| w * x)?;
    let method = match (keep_negative, final_relu) {
        (true, false) => Method::LayercamMod,
        _ => Method::Layercam,
    };
    let mut map = AttributionMap::from_features(feature_map, single_step_meta(view, method, target));
    if final_relu {
        map.collapsed = map.collapsed.map(|v| v.max(0.0));
    }
    if !matches!((keep_negative, final_relu), (false, true) | (true, false)) {
        map.note(format!(
            "layercam variant keep_negative={keep_negative} final_relu={final_relu}"
        ));
    }
    Ok(map)
}

/// Corrected ODAM for one output: signed LayerCAM without either ReLU, and
/// the output used as-is (box coordinates are never negated).
pub fn odam_single(view: &SplitView<'_>, a: &Tensor, target: Target) -> Result<AttributionMap> {
    let mut map = layercam(view, a, target, true, false)?;
    map.meta.method = Method::Odam;
    map.note("single-step integrated gradients from the zero feature map");
    Ok(map)
}

/// Signed elementwise maximum over the collapsed maps of several outputs.
///
/// The result carries the merged map as a single pseudo-channel, so its
/// `feature_map` collapses to `collapsed`. Merging explanations of different
/// outputs changes only the picture, not what any single output is
/// attributed to; the note in the metadata says so.
pub fn odam_combine(maps: &[AttributionMap]) -> Result<AttributionMap> {
    let first = maps
        .first()
        .ok_or_else(|| Error::InvalidArgument("odam_combine needs at least one map".into()))?;
    for m in &maps[1..] {
        if m.collapsed.shape() != first.collapsed.shape() {
            return Err(Error::shape("odam_combine", first.collapsed.shape(), m.collapsed.shape()));
        }
        if m.meta.split_index != first.meta.split_index {
            return Err(Error::InvalidArgument(format!(
                "odam_combine: split {} differs from {}",
                m.meta.split_index, first.meta.split_index
            )));
        }
    }
    let mut merged = first.collapsed.clone();
    for m in &maps[1..] {
        merged = merged.zip_map(&m.collapsed, f64::max)?;
    }
    let feature_map = if merged.rank() >= 2 {
        let mut shape = vec![1];
        shape.extend_from_slice(merged.shape());
        merged.clone().reshape(shape)?
    } else {
        merged.clone()
    };
    let baseline = if maps
        .iter()
        .all(|m| m.meta.baseline == BaselineProvenance::InputDerived)
    {
        BaselineProvenance::InputDerived
    } else {
        BaselineProvenance::RawFeature
    };
    let mut notes = vec![
        "signed elementwise maximum over per-output maps".to_string(),
        "merged maps change only the visualization; each attribution belongs to one output"
            .to_string(),
    ];
    if baseline == BaselineProvenance::RawFeature {
        notes.push(NO_INPUT_BASELINE_NOTE.to_string());
    }
    Ok(AttributionMap {
        feature_map,
        collapsed: merged,
        meta: AttributionMeta {
            method: Method::OdamCombined,
            scheme: first.meta.scheme,
            steps: first.meta.steps,
            split_index: first.meta.split_index,
            target: first.meta.target,
            sources: maps.iter().map(|m| m.meta.target).collect(),
            baseline,
            notes,
        },
    })
}

/// Integrated gradients on the features at `split_index`, with the baseline
/// given in input space: `A = head(x)`, `A' = head(x')`.
pub fn layer_integrated_gradients(
    model: &Model,
    x: &Tensor,
    x_base: &Tensor,
    split_index: usize,
    path: PathSpec,
    target: Target,
) -> Result<(AttributionMap, AttributionReport)> {
    let started = Instant::now();
    if x_base.shape() != model.input_shape() {
        return Err(Error::shape("input baseline", model.input_shape(), x_base.shape()));
    }
    let view = model.split(split_index)?;
    let a = view.forward_head(x)?;
    let a_base = view.forward_head(x_base)?;
    let y = view.tail_value(&a, target)?;
    let y_base = view.tail_value(&a_base, target)?;
    let mut map = integrated_gradients(&view, &a, &a_base, path, target)?;
    map.meta.baseline = BaselineProvenance::InputDerived;
    map.meta.notes.retain(|n| n != NO_INPUT_BASELINE_NOTE);
    let report = AttributionReport::from_map(&map, y, y_base, started.elapsed());
    Ok((map, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures;
    use crate::model::LayerSpec;

    fn linear_model(w: &[f64], b: f64) -> Model {
        let weight = Tensor::new(vec![1, w.len()], w.to_vec()).unwrap();
        Model::new("lin", vec![w.len()], vec![LayerSpec::linear(weight, Tensor::scalar(b))]).unwrap()
    }

    #[test]
    fn step_indices_per_scheme() {
        assert_eq!(PathSpec::right(3).step_indices().collect::<Vec<_>>(), vec![1, 2, 3]);
        assert_eq!(PathSpec::left(3).step_indices().collect::<Vec<_>>(), vec![0, 1, 2]);
        assert!(PathSpec::new(0, Scheme::Right).is_err());
    }

    #[test]
    fn saturation_ig_and_gradient_times_input() {
        let model = fixtures::saturation();
        let view = model.split(0).unwrap();
        let x = Tensor::scalar(2.0);
        let base = Tensor::scalar(0.0);
        let ig = integrated_gradients(&view, &x, &base, PathSpec::right(512), Target::logit(0)).unwrap();
        // 255 of 512 right points lie strictly below the kink at x = 1.
        assert_eq!(ig.feature_map.data(), &[255.0 * 2.0 / 512.0]);
        let gi = gradient_times_input(&view, &x, Target::logit(0)).unwrap();
        assert_eq!(gi.feature_map.data(), &[0.0]);
        let taylor = taylor_first_order(&view, &x, &base, Target::logit(0)).unwrap();
        assert_eq!(taylor.feature_map.data(), &[2.0]);
    }

    #[test]
    fn linear_tail_is_exact_for_any_steps() {
        let model = linear_model(&[2.0, -3.0], 0.5);
        let view = model.split(0).unwrap();
        let a = Tensor::from_vec(vec![1.5, -0.25]);
        let base = Tensor::from_vec(vec![0.1, 0.7]);
        let expected = Tensor::from_vec(vec![(1.5 - 0.1) * 2.0, (-0.25 - 0.7) * -3.0]);
        for path in [PathSpec::right(1), PathSpec::right(7), PathSpec::left(7), PathSpec::left(256)] {
            let map = integrated_gradients(&view, &a, &base, path, Target::logit(0)).unwrap();
            assert_eq!(map.feature_map, expected, "{path:?}");
        }
    }

    #[test]
    fn zero_path_gives_zero_attribution() {
        let model = fixtures::saturation();
        let view = model.split(0).unwrap();
        let a = Tensor::scalar(0.3);
        let map = integrated_gradients(&view, &a, &a, PathSpec::right(16), Target::logit(0)).unwrap();
        assert_eq!(map.feature_map.data(), &[0.0]);
    }

    #[test]
    fn layercam_masks_and_keeps() {
        let model = linear_model(&[-1.0, 2.0], 0.0);
        let view = model.split(0).unwrap();
        let a = Tensor::from_vec(vec![3.0, 4.0]);
        let orig = layercam(&view, &a, Target::logit(0), false, false).unwrap();
        assert_eq!(orig.feature_map.data(), &[0.0, 8.0]);
        let kept = layercam(&view, &a, Target::logit(0), true, false).unwrap();
        assert_eq!(kept.feature_map.data(), &[-3.0, 8.0]);
        assert_eq!(kept.meta.method, Method::LayercamMod);
        assert!(orig.meta.notes.iter().any(|n| n.contains("keep_negative=false")));
    }

    #[test]
    fn final_relu_clips_collapsed_map() {
        let model = linear_model(&[1.0, 1.0], 0.0);
        let view = model.split(0).unwrap();
        let a = Tensor::from_vec(vec![-3.0, 4.0]);
        let map = layercam(&view, &a, Target::logit(0), false, true).unwrap();
        assert_eq!(map.feature_map.data(), &[-3.0, 4.0]);
        assert_eq!(map.collapsed.data(), &[0.0, 4.0]);
        assert_eq!(map.meta.method, Method::Layercam);
    }

    #[test]
    fn odam_combine_max_and_errors() {
        let model = linear_model(&[1.0, -2.0], 0.0);
        let view = model.split(0).unwrap();
        let mut a = odam_single(&view, &Tensor::from_vec(vec![1.0, 1.0]), Target::logit(0)).unwrap();
        let mut b = a.clone();
        a.collapsed = Tensor::from_vec(vec![1.0, -2.0]);
        b.collapsed = Tensor::from_vec(vec![0.0, 5.0]);
        let merged = odam_combine(&[a.clone(), b]).unwrap();
        assert_eq!(merged.collapsed.data(), &[1.0, 5.0]);
        assert_eq!(merged.meta.sources.len(), 2);
        assert_eq!(odam_combine(std::slice::from_ref(&a)).unwrap().collapsed, a.collapsed);
        assert!(odam_combine(&[]).is_err());
        let mut wrong = a.clone();
        wrong.collapsed = Tensor::from_vec(vec![1.0]);
        assert!(odam_combine(&[a, wrong]).is_err());
    }

    #[test]
    fn shape_errors() {
        let model = linear_model(&[1.0, 1.0], 0.0);
        let view = model.split(0).unwrap();
        let err = integrated_gradients(
            &view,
            &Tensor::from_vec(vec![1.0]),
            &Tensor::from_vec(vec![1.0]),
            PathSpec::right(2),
            Target::logit(0),
        );
        assert!(matches!(err, Err(Error::ShapeMismatch { .. })));
    }

    #[test]
    fn non_finite_gradient_reports_step() {
        // exp overflow in softmax backward is impossible, so force a huge
        // weight whose square overflows: linear(1e200) -> linear(1e200).
        let w = Tensor::new(vec![1, 1], vec![1e200]).unwrap();
        let model = Model::new(
            "huge",
            vec![1],
            vec![
                LayerSpec::linear(w.clone(), Tensor::scalar(0.0)),
                LayerSpec::Relu,
                LayerSpec::linear(w, Tensor::scalar(0.0)),
            ],
        )
        .unwrap();
        let view = model.split(0).unwrap();
        let err = integrated_gradients(
            &view,
            &Tensor::scalar(1e-300),
            &Tensor::scalar(0.0),
            PathSpec::right(4),
            Target::logit(0),
        )
        .err()
        .unwrap();
        assert!(err.is_numerical());
        assert!(err.to_string().contains("path step 1/4"), "{err}");
    }

    #[test]
    fn layer_ig_report_on_linear_model() {
        let model = linear_model(&[2.0, -3.0], 1.0);
        let x = Tensor::from_vec(vec![1.0, 1.0]);
        let (map, report) =
            layer_integrated_gradients(&model, &x, &Tensor::zeros(&[2]), 0, PathSpec::right(256), Target::logit(0))
                .unwrap();
        assert_eq!(report.delta, -1.0);
        assert!(report.abs_error < 1e-12);
        assert_eq!(map.meta.baseline, BaselineProvenance::InputDerived);

        let (map, report) =
            layer_integrated_gradients(&model, &x, &x, 0, PathSpec::right(8), Target::logit(0)).unwrap();
        assert_eq!(report.delta, 0.0);
        assert_eq!(report.abs_error, 0.0);
        assert!(report.rel_error.is_none());
        assert!(map.feature_map.data().iter().all(|&v| v == 0.0));
    }
}
