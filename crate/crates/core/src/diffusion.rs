//! Guided nonlinear diffusion solved with an explicit finite-difference
//! scheme.
//!
//! Each step computes, for every pixel `p` and every tap `q` of an `h × w`
//! window around it (coordinates clamped to the image),
//!
//! ```text
//! Ũ(p) = Σ_q g(s(p, q)) · (U(q) − U(p))
//! U'(p) = α · U(p) + β · Ũ(p)
//! ```
//!
//! where `s` is the channel-mean squared difference of the guidance `V` and
//! `g(s) = 1 / sqrt(1 + s / λ²)`. All channels of `U` share one similarity
//! field.

use crate::error::{Error, Result};
use crate::par;
use crate::tensor::{clamp_index, lit, FeatureMap, Scalar};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DiffusivityConfig {
    lambda: f64,
}

impl DiffusivityConfig {
    pub fn new(lambda: f64) -> Result<Self> {
        if !(lambda > 0.0 && lambda.is_finite()) {
            return Err(Error::InvalidParameter(format!("lambda must be positive, got {lambda}")));
        }
        Ok(Self { lambda })
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    /// `g(s)` without argument validation; `s` must be nonnegative.
    #[inline]
    pub fn eval<T: Scalar>(&self, s: T) -> T {
        let l = lit::<T>(self.lambda);
        T::one() / (T::one() + s / (l * l)).sqrt()
    }

    /// `dg/ds = -(1 + s/λ²)^(-3/2) / (2λ²)`.
    #[inline]
    pub fn derivative<T: Scalar>(&self, s: T) -> T {
        let l2 = lit::<T>(self.lambda * self.lambda);
        let base = T::one() + s / l2;
        -(base * base * base).sqrt().recip() / (lit::<T>(2.0) * l2)
    }
}

/// Edge-stopping diffusivity `1 / sqrt(1 + s / λ²)`, in `(0, 1]`.
pub fn diffusivity(s: f64, cfg: &DiffusivityConfig) -> Result<f64> {
    if !(s >= 0.0) {
        return Err(Error::InvalidParameter(format!("squared difference must be >= 0, got {s}")));
    }
    Ok(cfg.eval(s))
}

/// Step count and constant per-step weights of the explicit scheme.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DiffusionSchedule {
    pub steps: usize,
    pub alpha: f64,
    pub beta: f64,
    /// Window extents `(h, w)`, both odd.
    pub neighborhood: (usize, usize),
}

impl Default for DiffusionSchedule {
    fn default() -> Self {
        Self { steps: 1, alpha: 1.0, beta: 1.0 / 9.0, neighborhood: (3, 3) }
    }
}

impl DiffusionSchedule {
    pub fn new(steps: usize, alpha: f64, beta: f64, neighborhood: (usize, usize)) -> Result<Self> {
        if !(alpha > 0.0 && alpha <= 1.0) {
            return Err(Error::InvalidParameter(format!("alpha must lie in (0, 1], got {alpha}")));
        }
        if !(beta > 0.0 && beta.is_finite()) {
            return Err(Error::InvalidParameter(format!("beta must be positive, got {beta}")));
        }
        let (h, w) = neighborhood;
        if h % 2 == 0 || w % 2 == 0 {
            return Err(Error::InvalidParameter(format!("neighborhood {h}x{w} must have odd extents")));
        }
        Ok(Self { steps, alpha, beta, neighborhood })
    }

    /// `α = 1`, `β = 1 / (h·w)`.
    pub fn conservative(steps: usize, neighborhood: (usize, usize)) -> Result<Self> {
        let (h, w) = neighborhood;
        Self::new(steps, 1.0, 1.0 / (h * w) as f64, neighborhood)
    }

    /// Set when `β · (h·w − 1) > 1`; the explicit update may then overshoot.
    pub fn stability_warning(&self) -> bool {
        let (h, w) = self.neighborhood;
        self.beta * (h * w - 1) as f64 > 1.0
    }
}

/// One explicit update of `U` guided by `V`.
pub fn diffusion_step<T: Scalar>(
    u: &FeatureMap<T>,
    v: &FeatureMap<T>,
    sched: &DiffusionSchedule,
    cfg: &DiffusivityConfig,
) -> Result<FeatureMap<T>> {
    if u.spatial() != v.spatial() {
        return Err(Error::ShapeMismatch(format!(
            "diffusion needs U and V at one resolution, got {:?} and {:?}",
            u.spatial(),
            v.spatial()
        )));
    }
    let (c, h, w) = u.dims();
    let (kh, kw) = sched.neighborhood;
    let (ry, rx) = ((kh / 2) as isize, (kw / 2) as isize);
    let taps = kh * kw;
    let cv = v.channels();
    let inv_cv = lit::<T>(1.0 / cv as f64);

    // g for every (pixel, tap), stored pixel-major
    let mut g = vec![T::zero(); h * w * taps];
    par::for_each_row(&mut g, w * taps, |y, row| {
        for x in 0..w {
            let mut t = 0;
            for dy in -ry..=ry {
                let qy = clamp_index(y as isize + dy, h);
                for dx in -rx..=rx {
                    let qx = clamp_index(x as isize + dx, w);
                    let mut s = T::zero();
                    for ci in 0..cv {
                        let d = v.get(ci, qy, qx) - v.get(ci, y, x);
                        s = s + d * d;
                    }
                    row[x * taps + t] = cfg.eval(s * inv_cv);
                    t += 1;
                }
            }
        }
    });

    let (alpha, beta) = (lit::<T>(sched.alpha), lit::<T>(sched.beta));
    let mut out = FeatureMap::zeros(c, h, w)?;
    par::for_each_row(out.data_mut(), w, |r, row| {
        let (ci, y) = (r / h, r % h);
        for (x, o) in row.iter_mut().enumerate() {
            let center = u.get(ci, y, x);
            let gp = &g[(y * w + x) * taps..(y * w + x + 1) * taps];
            let mut acc = T::zero();
            let mut t = 0;
            for dy in -ry..=ry {
                let qy = clamp_index(y as isize + dy, h);
                for dx in -rx..=rx {
                    let qx = clamp_index(x as isize + dx, w);
                    acc = acc + gp[t] * (u.get(ci, qy, qx) - center);
                    t += 1;
                }
            }
            *o = alpha * center + beta * acc;
        }
    });
    Ok(out)
}

/// `sched.steps` applications of [`diffusion_step`].
pub fn diffuse<T: Scalar>(
    u: &FeatureMap<T>,
    v: &FeatureMap<T>,
    sched: &DiffusionSchedule,
    cfg: &DiffusivityConfig,
) -> Result<FeatureMap<T>> {
    diffuse_with(u, v, sched, cfg, |_, _| {})
}

/// Like [`diffuse`], calling `on_step(t, U_t)` after every step (t starts at 1).
pub fn diffuse_with<T: Scalar>(
    u: &FeatureMap<T>,
    v: &FeatureMap<T>,
    sched: &DiffusionSchedule,
    cfg: &DiffusivityConfig,
    mut on_step: impl FnMut(usize, &FeatureMap<T>),
) -> Result<FeatureMap<T>> {
    if u.spatial() != v.spatial() {
        return Err(Error::ShapeMismatch(format!(
            "diffusion needs U and V at one resolution, got {:?} and {:?}",
            u.spatial(),
            v.spatial()
        )));
    }
    let mut cur = u.clone();
    for t in 1..=sched.steps {
        cur = diffusion_step(&cur, v, sched, cfg)?;
        on_step(t, &cur);
    }
    Ok(cur)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn cfg(l: f64) -> DiffusivityConfig {
        DiffusivityConfig::new(l).unwrap()
    }

    fn impulse() -> FeatureMap {
        FeatureMap::from_fn(1, 3, 3, |_, y, x| if (y, x) == (1, 1) { 1.0 } else { 0.0 }).unwrap()
    }

    fn random_map(rng: &mut ChaCha8Rng, c: usize, h: usize, w: usize) -> FeatureMap {
        FeatureMap::from_fn(c, h, w, |_, _, _| rng.gen_range(-1.0..1.0)).unwrap()
    }

    #[test]
    fn diffusivity_values() {
        let c = cfg(0.7);
        let l2 = 0.49;
        assert_eq!(diffusivity(0.0, &c).unwrap(), 1.0);
        assert_abs_diff_eq!(diffusivity(l2, &c).unwrap(), std::f64::consts::FRAC_1_SQRT_2, epsilon = 1e-15);
        assert_abs_diff_eq!(diffusivity(3.0 * l2, &c).unwrap(), 0.5, epsilon = 1e-15);
        assert!(diffusivity(-1e-3, &c).is_err());
        assert!(diffusivity(f64::NAN, &c).is_err());
    }

    #[test]
    fn derivative_matches_central_difference() {
        let c = cfg(0.6);
        for s in [0.01f64, 0.1, 0.36, 2.0, 10.0] {
            let h = 1e-6;
            let fd = (c.eval(s + h) - c.eval(s - h)) / (2.0 * h);
            assert_abs_diff_eq!(c.derivative(s), fd, epsilon = 1e-7);
        }
    }

    #[test]
    fn invalid_configs_rejected() {
        assert!(DiffusivityConfig::new(0.0).is_err());
        assert!(DiffusionSchedule::new(1, 0.0, 0.1, (3, 3)).is_err());
        assert!(DiffusionSchedule::new(1, 1.1, 0.1, (3, 3)).is_err());
        assert!(DiffusionSchedule::new(1, 1.0, 0.0, (3, 3)).is_err());
        assert!(DiffusionSchedule::new(1, 1.0, 0.1, (2, 3)).is_err());
    }

    #[test]
    fn stability_guard_flag() {
        assert!(!DiffusionSchedule::new(1, 1.0, 1.0 / 8.0, (3, 3)).unwrap().stability_warning());
        assert!(DiffusionSchedule::new(1, 1.0, 0.2, (3, 3)).unwrap().stability_warning());
        assert!(!DiffusionSchedule::conservative(4, (5, 5)).unwrap().stability_warning());
    }

    #[test]
    fn constant_u_gives_alpha_u() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let u = FeatureMap::full(2, 5, 4, 0.8).unwrap();
        let v = random_map(&mut rng, 3, 5, 4);
        let sched = DiffusionSchedule::new(1, 0.5, 0.1, (3, 3)).unwrap();
        let out = diffusion_step(&u, &v, &sched, &cfg(0.3)).unwrap();
        assert!(out.data().iter().all(|&x| x == 0.4));
    }

    #[test]
    fn impulse_with_constant_guidance() {
        // center: 1 + (1/9)(-8) = 1/9; corner (0,0) sees the center once -> 1/9
        let v = FeatureMap::full(1, 3, 3, 0.3).unwrap();
        let sched = DiffusionSchedule::new(1, 1.0, 1.0 / 9.0, (3, 3)).unwrap();
        let out = diffusion_step(&impulse(), &v, &sched, &cfg(1.0)).unwrap();
        assert_abs_diff_eq!(out.get(0, 1, 1), 1.0 / 9.0, epsilon = 1e-15);
        assert_abs_diff_eq!(out.get(0, 0, 0), 1.0 / 9.0, epsilon = 1e-15);
        // edge (0,1): clamped window rows {0,0,1}, cols {0,1,2}; the center appears once
        assert_abs_diff_eq!(out.get(0, 0, 1), 1.0 / 9.0, epsilon = 1e-15);
    }

    #[test]
    fn impulse_isolated_by_guidance() {
        // V = 1 at the center, 0 elsewhere, λ = 1e-3: cross-region g = 1/sqrt(1 + 1e6) ≈ 1e-3
        let v = impulse();
        let c = cfg(1e-3);
        let g_cross = c.eval(1.0);
        let sched = DiffusionSchedule::new(1, 1.0, 1.0 / 9.0, (3, 3)).unwrap();
        let out = diffusion_step(&impulse(), &v, &sched, &c).unwrap();
        assert_abs_diff_eq!(out.get(0, 1, 1), 1.0 - 8.0 * g_cross / 9.0, epsilon = 1e-15);
        assert!((out.get(0, 1, 1) - 1.0).abs() < 1e-3);
        assert!(out.get(0, 0, 0) < 1e-3);
    }

    #[test]
    fn zero_steps_is_identity_and_one_step_matches() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let u = random_map(&mut rng, 1, 6, 6);
        let v = random_map(&mut rng, 2, 6, 6);
        let c = cfg(0.5);
        let s0 = DiffusionSchedule::conservative(0, (3, 3)).unwrap();
        assert_eq!(diffuse(&u, &v, &s0, &c).unwrap(), u);
        let s1 = DiffusionSchedule::conservative(1, (3, 3)).unwrap();
        assert_eq!(diffuse(&u, &v, &s1, &c).unwrap(), diffusion_step(&u, &v, &s1, &c).unwrap());
    }

    #[test]
    fn fifty_steps_conserve_mean_and_shrink_range() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let u = random_map(&mut rng, 1, 8, 8);
        let v = FeatureMap::full(1, 8, 8, 0.0).unwrap();
        let sched = DiffusionSchedule::new(50, 1.0, 1.0 / 9.0, (3, 3)).unwrap();
        let m0 = u.tensor().mean();
        let mut prev_range = u.tensor().max() - u.tensor().min();
        diffuse_with(&u, &v, &sched, &cfg(1.0), |_, ut| {
            assert_abs_diff_eq!(ut.tensor().mean(), m0, epsilon = 1e-10);
            let r = ut.tensor().max() - ut.tensor().min();
            assert!(r < prev_range, "range {r} did not shrink below {prev_range}");
            prev_range = r;
        })
        .unwrap();
    }

    #[test]
    fn semantic_guidance_preserves_step_edge() {
        // left half 0, right half 1, plus noise; compare inter-region contrast
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let (h, w) = (12, 12);
        let u = FeatureMap::from_fn(1, h, w, |_, _, x| {
            let step = if x >= w / 2 { 1.0 } else { 0.0 };
            step + rng.gen_range(-0.2..0.2)
        })
        .unwrap();
        let indicator = FeatureMap::from_fn(1, h, w, |_, _, x| if x >= w / 2 { 1.0 } else { 0.0 }).unwrap();
        let flat = FeatureMap::full(1, h, w, 0.0).unwrap();
        let sched = DiffusionSchedule::conservative(30, (3, 3)).unwrap();
        let c = cfg(0.1);
        let contrast = |m: &FeatureMap| {
            let (mut l, mut r) = (0.0, 0.0);
            for y in 0..h {
                for x in 0..w {
                    if x >= w / 2 {
                        r += m.get(0, y, x);
                    } else {
                        l += m.get(0, y, x);
                    }
                }
            }
            (r - l) / (h * w / 2) as f64
        };
        let guided = diffuse(&u, &indicator, &sched, &c).unwrap();
        let blind = diffuse(&u, &flat, &sched, &c).unwrap();
        assert!(contrast(&guided) > contrast(&blind));
    }

    #[test]
    fn spatial_mismatch_rejected() {
        let u = FeatureMap::<f64>::zeros(1, 4, 4).unwrap();
        let v = FeatureMap::<f64>::zeros(1, 2, 2).unwrap();
        assert!(diffusion_step(&u, &v, &DiffusionSchedule::default(), &cfg(1.0)).is_err());
    }

    proptest! {
        #[test]
        fn g_strictly_decreasing(a in 0.0f64..100.0, d in 1e-6f64..100.0, l in 0.01f64..10.0) {
            let c = cfg(l);
            prop_assert!(c.eval(a) > c.eval(a + d));
        }

        #[test]
        fn conservation_and_max_principle(seed in 0u64..1000, h in 1usize..9, w in 1usize..9, l in 0.05f64..3.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let u = random_map(&mut rng, 2, h, w);
            let v = random_map(&mut rng, 3, h, w);
            let sched = DiffusionSchedule::new(1, 1.0, 1.0 / 8.0, (3, 3)).unwrap();
            let out = diffusion_step(&u, &v, &sched, &cfg(l)).unwrap();
            prop_assert!((out.tensor().mean() - u.tensor().mean()).abs() <= 1e-10);
            let (lo, hi) = (u.tensor().min(), u.tensor().max());
            prop_assert!(out.data().iter().all(|&x| x >= lo - 1e-12 && x <= hi + 1e-12));
        }

        #[test]
        fn constant_is_fixed_point(c0 in -5.0f64..5.0, seed in 0u64..100) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let u = FeatureMap::full(1, 5, 6, c0).unwrap();
            let v = random_map(&mut rng, 1, 5, 6);
            let out = diffusion_step(&u, &v, &DiffusionSchedule::default(), &cfg(0.5)).unwrap();
            prop_assert_eq!(out, u);
        }
    }
}
