//! Rule-based domain constraints applied to the ascent gradient.
//!
//! Each transform rewrites the gradient so that a step `x + s * G'` stays
//! inside the domain's notion of a realistic input: uniform lighting
//! changes, a single occluding rectangle, frozen dirt-like black patches
//! that may only darken, or additive-only binary features. `clamp` then
//! projects the stepped input back onto the domain.

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Which realism rule to enforce during ascent.
#[derive(Debug, Clone, PartialEq)]
pub enum ConstraintSpec {
    /// No rule; only the [0,1] domain clamp applies.
    Unconstrained,
    /// Brighten or darken every pixel by the same amount; the sign follows
    /// the mean of the gradient.
    Lighting,
    /// One `height x width` window keeps its gradient, everything else is
    /// zeroed. By default the window goes where the gradient mass is
    /// largest (ties to the smallest row-major corner), re-chosen every
    /// iteration; `random_pos` places it uniformly at random instead.
    SingleRect {
        height: usize,
        width: usize,
        random_pos: bool,
    },
    /// `count` patches of `size x size`, positions drawn once per seed and
    /// frozen. A patch whose mean gradient is positive is zeroed (dirt
    /// never brightens); the rest keep their gradient. Outside the patches
    /// nothing changes.
    BlackPatches { size: usize, count: usize },
    /// Binary features that may only flip 0 -> 1, and only where the mask
    /// allows. The gradient is rounded to an indicator.
    DiscreteAdditive { allowed_mask: Tensor },
}

/// Per-seed constraint state: the seed input itself plus any frozen random
/// choices (black-patch positions). Never shared across seeds.
#[derive(Debug, Clone)]
pub struct SeedState {
    seed: Tensor,
    patch_positions: Vec<(usize, usize)>,
}

impl SeedState {
    pub fn seed(&self) -> &Tensor {
        &self.seed
    }

    pub fn patch_positions(&self) -> &[(usize, usize)] {
        &self.patch_positions
    }
}

/// (rows, cols) of the trailing spatial dimensions.
fn spatial_hw(shape: &[usize]) -> Result<(usize, usize)> {
    match shape {
        [h, w] => Ok((*h, *w)),
        [_, h, w] => Ok((*h, *w)),
        other => Err(Error::InvalidConfig(format!(
            "spatial constraint needs a 2-D input, got shape {other:?}"
        ))),
    }
}

/// Leading (channel) size: 1 for [H,W], C for [C,H,W].
fn channels(shape: &[usize]) -> usize {
    if shape.len() == 3 {
        shape[0]
    } else {
        1
    }
}

impl ConstraintSpec {
    /// Config-file token for this constraint.
    pub fn name(&self) -> String {
        match self {
            ConstraintSpec::Unconstrained => "none".into(),
            ConstraintSpec::Lighting => "lighting".into(),
            ConstraintSpec::SingleRect {
                height,
                width,
                random_pos,
            } => {
                if *random_pos {
                    format!("rect:{height}x{width}:random")
                } else {
                    format!("rect:{height}x{width}")
                }
            }
            ConstraintSpec::BlackPatches { size, count } => format!("patches:{size}:{count}"),
            ConstraintSpec::DiscreteAdditive { .. } => "additive".into(),
        }
    }

    /// Parses a config token: `none | lighting | rect:MxN[:random] |
    /// patches:M:COUNT | additive`. `additive` allows every feature; build
    /// the spec directly for a custom mask.
    pub fn parse(token: &str, input_shape: &[usize]) -> Result<ConstraintSpec> {
        let bad = |t: &str| Error::InvalidConfig(format!("unknown constraint '{t}'"));
        if token == "none" {
            return Ok(ConstraintSpec::Unconstrained);
        }
        if token == "lighting" {
            return Ok(ConstraintSpec::Lighting);
        }
        if token == "additive" {
            return Ok(ConstraintSpec::DiscreteAdditive {
                allowed_mask: Tensor::filled(input_shape.to_vec(), 1.0),
            });
        }
        if let Some(rest) = token.strip_prefix("rect:") {
            let (dims, random_pos) = match rest.strip_suffix(":random") {
                Some(d) => (d, true),
                None => (rest, false),
            };
            let (h, w) = dims
                .split_once('x')
                .and_then(|(a, b)| Some((a.parse().ok()?, b.parse().ok()?)))
                .ok_or_else(|| bad(token))?;
            return Ok(ConstraintSpec::SingleRect {
                height: h,
                width: w,
                random_pos,
            });
        }
        if let Some(rest) = token.strip_prefix("patches:") {
            let (size, count) = rest
                .split_once(':')
                .and_then(|(a, b)| Some((a.parse().ok()?, b.parse().ok()?)))
                .ok_or_else(|| bad(token))?;
            return Ok(ConstraintSpec::BlackPatches { size, count });
        }
        Err(bad(token))
    }

    /// Validates the constraint against an input shape and draws any
    /// per-seed random choices.
    pub fn init_seed_state<R: Rng>(&self, seed: &Tensor, rng: &mut R) -> Result<SeedState> {
        let mut patch_positions = Vec::new();
        match self {
            ConstraintSpec::SingleRect { height, width, .. } => {
                let (h, w) = spatial_hw(seed.shape())?;
                if *height == 0 || *width == 0 || *height > h || *width > w {
                    return Err(Error::InvalidConfig(format!(
                        "rectangle {height}x{width} does not fit {h}x{w} input"
                    )));
                }
            }
            ConstraintSpec::BlackPatches { size, count } => {
                let (h, w) = spatial_hw(seed.shape())?;
                if *size == 0 || *size > h || *size > w {
                    return Err(Error::InvalidConfig(format!(
                        "patch size {size} does not fit {h}x{w} input"
                    )));
                }
                let rows = h - size + 1;
                let cols = w - size + 1;
                let total = rows * cols;
                let picks = rand::seq::index::sample(rng, total, (*count).min(total));
                patch_positions = picks.iter().map(|p| (p / cols, p % cols)).collect();
                patch_positions.sort_unstable();
            }
            ConstraintSpec::DiscreteAdditive { allowed_mask } => {
                allowed_mask.check_same_shape(seed)?;
                if seed.data().iter().any(|&v| v != 0.0 && v != 1.0) {
                    return Err(Error::InvalidConfig(
                        "additive constraint needs a binary seed".into(),
                    ));
                }
            }
            _ => {}
        }
        Ok(SeedState {
            seed: seed.clone(),
            patch_positions,
        })
    }

    /// Rewrites the gradient according to the constraint rule.
    pub fn apply<R: Rng>(
        &self,
        grad: &Tensor,
        x: &Tensor,
        rng: &mut R,
        state: &SeedState,
    ) -> Result<Tensor> {
        grad.check_same_shape(x)?;
        match self {
            ConstraintSpec::Unconstrained => Ok(grad.clone()),
            ConstraintSpec::Lighting => {
                let direction = match grad.mean() {
                    m if m > 0.0 => 1.0,
                    m if m < 0.0 => -1.0,
                    _ => 0.0,
                };
                Ok(Tensor::filled(grad.shape().to_vec(), direction))
            }
            ConstraintSpec::SingleRect {
                height,
                width,
                random_pos,
            } => {
                let (h, w) = spatial_hw(grad.shape())?;
                let c = channels(grad.shape());
                let (top, left) = if *random_pos {
                    (
                        rng.gen_range(0..=h - height),
                        rng.gen_range(0..=w - width),
                    )
                } else {
                    argmax_window(grad, c, h, w, *height, *width)
                };
                let mut out = Tensor::zeros(grad.shape().to_vec());
                copy_window(grad, &mut out, c, h, w, top, left, *height, *width);
                Ok(out)
            }
            ConstraintSpec::BlackPatches { size, .. } => {
                let (h, w) = spatial_hw(grad.shape())?;
                let c = channels(grad.shape());
                let mut out = Tensor::zeros(grad.shape().to_vec());
                for &(top, left) in &state.patch_positions {
                    if window_mean(grad, c, h, w, top, left, *size, *size) > 0.0 {
                        continue; // dirt only darkens; drop brightening patches
                    }
                    copy_window(grad, &mut out, c, h, w, top, left, *size, *size);
                }
                Ok(out)
            }
            ConstraintSpec::DiscreteAdditive { allowed_mask } => {
                allowed_mask.check_same_shape(grad)?;
                let data = grad
                    .data()
                    .iter()
                    .zip(allowed_mask.data())
                    .zip(x.data())
                    .map(|((g, m), xv)| {
                        if *g > 0.0 && *m != 0.0 && *xv == 0.0 {
                            1.0
                        } else {
                            0.0
                        }
                    })
                    .collect();
                Tensor::new(grad.shape().to_vec(), data)
            }
        }
    }

    /// Projects a stepped input back onto the domain. Image domains clamp
    /// to [0,1]; the additive domain snaps to {0,1} while guaranteeing
    /// `x' >= seed` on allowed features and `x' == seed` elsewhere.
    pub fn clamp(&self, x: &Tensor, state: &SeedState) -> Result<Tensor> {
        match self {
            ConstraintSpec::DiscreteAdditive { allowed_mask } => {
                allowed_mask.check_same_shape(x)?;
                let data = x
                    .data()
                    .iter()
                    .zip(allowed_mask.data())
                    .zip(state.seed.data())
                    .map(|((v, m), s)| {
                        if *m == 0.0 {
                            *s
                        } else {
                            let snapped: f64 = if *v >= 0.5 { 1.0 } else { 0.0 };
                            snapped.max(*s)
                        }
                    })
                    .collect();
                Tensor::new(x.shape().to_vec(), data)
            }
            _ => Ok(x.map(|v| v.clamp(0.0, 1.0))),
        }
    }

    /// The effective ascent step: binary features flip in one move, so the
    /// configured step size is ignored for the additive rule.
    pub fn effective_step(&self, step_size: f64) -> f64 {
        match self {
            ConstraintSpec::DiscreteAdditive { .. } => 1.0,
            _ => step_size,
        }
    }
}

fn window_mean(
    t: &Tensor,
    c: usize,
    h: usize,
    w: usize,
    top: usize,
    left: usize,
    wh: usize,
    ww: usize,
) -> f64 {
    let mut acc = 0.0;
    for ch in 0..c {
        for y in top..top + wh {
            for x in left..left + ww {
                acc += t.data()[ch * h * w + y * w + x];
            }
        }
    }
    acc / (c * wh * ww) as f64
}

fn copy_window(
    src: &Tensor,
    dst: &mut Tensor,
    c: usize,
    h: usize,
    w: usize,
    top: usize,
    left: usize,
    wh: usize,
    ww: usize,
) {
    for ch in 0..c {
        for y in top..top + wh {
            for x in left..left + ww {
                let idx = ch * h * w + y * w + x;
                dst.data_mut()[idx] = src.data()[idx];
            }
        }
    }
}

/// Window position maximizing the summed absolute gradient; ties keep the
/// smallest (row, col) in row-major order.
fn argmax_window(
    grad: &Tensor,
    c: usize,
    h: usize,
    w: usize,
    wh: usize,
    ww: usize,
) -> (usize, usize) {
    let mut best = (0usize, 0usize);
    let mut best_mass = f64::NEG_INFINITY;
    for top in 0..=h - wh {
        for left in 0..=w - ww {
            let mut mass = 0.0;
            for ch in 0..c {
                for y in top..top + wh {
                    for x in left..left + ww {
                        mass += grad.data()[ch * h * w + y * w + x].abs();
                    }
                }
            }
            if mass > best_mass {
                best_mass = mass;
                best = (top, left);
            }
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testutil::rng;

    fn state_for(spec: &ConstraintSpec, seed: &Tensor) -> SeedState {
        spec.init_seed_state(seed, &mut rng(1)).unwrap()
    }

    #[test]
    fn lighting_sign_rule() {
        let spec = ConstraintSpec::Lighting;
        let x = Tensor::zeros(vec![2, 2]);
        let state = state_for(&spec, &x);
        let g = Tensor::new(vec![2, 2], vec![0.5, -0.2, 0.1, 0.2]).unwrap();
        let out = spec.apply(&g, &x, &mut rng(0), &state).unwrap();
        assert_eq!(out.data(), &[1.0, 1.0, 1.0, 1.0]);

        let g = Tensor::filled(vec![2, 2], -0.3);
        let out = spec.apply(&g, &x, &mut rng(0), &state).unwrap();
        assert_eq!(out.data(), &[-1.0, -1.0, -1.0, -1.0]);

        let g = Tensor::new(vec![2, 2], vec![0.5, -0.5, 0.25, -0.25]).unwrap();
        let out = spec.apply(&g, &x, &mut rng(0), &state).unwrap();
        assert_eq!(out.data(), &[0.0; 4]);
    }

    #[test]
    fn single_rect_argmax_window() {
        let spec = ConstraintSpec::SingleRect {
            height: 1,
            width: 1,
            random_pos: false,
        };
        let x = Tensor::zeros(vec![2, 2]);
        let state = state_for(&spec, &x);
        let g = Tensor::new(vec![2, 2], vec![0.0, 0.0, 0.0, 9.0]).unwrap();
        let out = spec.apply(&g, &x, &mut rng(0), &state).unwrap();
        assert_eq!(out.data(), &[0.0, 0.0, 0.0, 9.0]);
    }

    #[test]
    fn single_rect_tie_breaks_row_major() {
        let spec = ConstraintSpec::SingleRect {
            height: 1,
            width: 1,
            random_pos: false,
        };
        let x = Tensor::zeros(vec![2, 2]);
        let state = state_for(&spec, &x);
        // |g| equal everywhere: the (0,0) window wins.
        let g = Tensor::new(vec![2, 2], vec![-3.0, 3.0, 3.0, 3.0]).unwrap();
        let out = spec.apply(&g, &x, &mut rng(0), &state).unwrap();
        assert_eq!(out.data(), &[-3.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn rect_must_fit() {
        let spec = ConstraintSpec::SingleRect {
            height: 5,
            width: 1,
            random_pos: false,
        };
        let x = Tensor::zeros(vec![2, 2]);
        assert!(spec.init_seed_state(&x, &mut rng(0)).is_err());
    }

    #[test]
    fn black_patches_drop_brightening_patches_and_freeze_positions() {
        let spec = ConstraintSpec::BlackPatches { size: 1, count: 4 };
        let x = Tensor::zeros(vec![3, 3]);
        let state = state_for(&spec, &x);
        assert_eq!(state.patch_positions().len(), 4);
        let again = state_for(&spec, &x);
        assert_eq!(state.patch_positions(), again.patch_positions());

        let g = Tensor::new(
            vec![3, 3],
            vec![1.0, -1.0, 2.0, -2.0, 0.5, -0.5, 3.0, -3.0, 0.25],
        )
        .unwrap();
        let out = spec.apply(&g, &x, &mut rng(9), &state).unwrap();
        for (i, v) in out.data().iter().enumerate() {
            let pos = (i / 3, i % 3);
            let inside = state.patch_positions().contains(&pos);
            if !inside {
                assert_eq!(*v, 0.0, "outside patches must stay zero");
            } else if g.data()[i] > 0.0 {
                assert_eq!(*v, 0.0, "positive-mean 1x1 patch must be zeroed");
            } else {
                assert_eq!(*v, g.data()[i]);
            }
        }
    }

    #[test]
    fn discrete_additive_rule_composition() {
        // x = [0,1,0], mask = [1,1,0], G = [0.4,0.9,2.0] -> G' = [1,0,0].
        let mask = Tensor::new(vec![3], vec![1.0, 1.0, 0.0]).unwrap();
        let spec = ConstraintSpec::DiscreteAdditive {
            allowed_mask: mask,
        };
        let x = Tensor::new(vec![3], vec![0.0, 1.0, 0.0]).unwrap();
        let state = state_for(&spec, &x);
        let g = Tensor::new(vec![3], vec![0.4, 0.9, 2.0]).unwrap();
        let out = spec.apply(&g, &x, &mut rng(0), &state).unwrap();
        assert_eq!(out.data(), &[1.0, 0.0, 0.0]);
    }

    #[test]
    fn clamp_images_and_binary() {
        let spec = ConstraintSpec::Unconstrained;
        let x = Tensor::zeros(vec![2]);
        let state = state_for(&spec, &x);
        let stepped = Tensor::new(vec![2], vec![1.7, -0.2]).unwrap();
        let clamped = spec.clamp(&stepped, &state).unwrap();
        assert_eq!(clamped.data(), &[1.0, 0.0]);
        // Idempotent on valid input.
        let again = spec.clamp(&clamped, &state).unwrap();
        assert_eq!(again, clamped);

        let mask = Tensor::new(vec![2], vec![1.0, 0.0]).unwrap();
        let add = ConstraintSpec::DiscreteAdditive { allowed_mask: mask };
        let seed = Tensor::new(vec![2], vec![0.0, 0.0]).unwrap();
        let state = add.init_seed_state(&seed, &mut rng(0)).unwrap();
        let stepped = Tensor::new(vec![2], vec![0.999, 0.999]).unwrap();
        let clamped = add.clamp(&stepped, &state).unwrap();
        // Allowed feature snaps to 1; masked-off feature returns to seed.
        assert_eq!(clamped.data(), &[1.0, 0.0]);
    }

    #[test]
    fn additive_never_deletes() {
        let mask = Tensor::new(vec![3], vec![1.0, 1.0, 1.0]).unwrap();
        let add = ConstraintSpec::DiscreteAdditive { allowed_mask: mask };
        let seed = Tensor::new(vec![3], vec![0.0, 1.0, 0.0]).unwrap();
        let state = add.init_seed_state(&seed, &mut rng(0)).unwrap();
        // A step that tries to zero out feature 1 is undone by the clamp.
        let stepped = Tensor::new(vec![3], vec![0.2, 0.1, 1.0]).unwrap();
        let clamped = add.clamp(&stepped, &state).unwrap();
        assert_eq!(clamped.data(), &[0.0, 1.0, 1.0]);
    }

    #[test]
    fn parse_round_trips() {
        let shape = [1usize, 4, 4];
        for token in ["none", "lighting", "rect:2x3", "rect:2x3:random", "patches:2:10", "additive"] {
            let spec = ConstraintSpec::parse(token, &shape).unwrap();
            assert_eq!(spec.name(), token);
        }
        assert!(ConstraintSpec::parse("sepia", &shape).is_err());
    }
}
