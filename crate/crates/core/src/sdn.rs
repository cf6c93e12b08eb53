//! The semantic diffusion neck: SDC followed by 1×1 fusion of `[U, Y]`,
//! the stride-2 guidance projection Φ, and single/multi-scale wiring.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{format_err, Error, Result};
use crate::io::{load_tensors, save_tensors};
use crate::ops::{conv2d, conv2d_strided, sdc2d, SdcKernel};
use crate::tensor::{concat_channels, FeatureMap, Scalar, Tensor};

/// Parameters of one SDN block.
#[derive(Clone, Debug, PartialEq)]
pub struct SdnParams<T = f64> {
    pub sdc: SdcKernel<T>,
    /// `(C_out, C_in + C_y, 1, 1)` fusion weights, stored as a 1×1 kernel.
    pub fusion: SdcKernel<T>,
    /// Stride-2 3×3 guidance projection, when this block builds its own guidance.
    pub phi: Option<SdcKernel<T>>,
}

impl<T: Scalar> SdnParams<T> {
    pub fn new(sdc: SdcKernel<T>, fusion_weights: Tensor<T>, phi: Option<SdcKernel<T>>) -> Result<Self> {
        let fusion = SdcKernel::new(fusion_weights, 1, 1.0)?;
        if (fusion.kernel_h(), fusion.kernel_w()) != (1, 1) {
            return Err(Error::InvalidShape("fusion weights must be 1x1".into()));
        }
        if fusion.c_in() != sdc.c_in() + sdc.c_out() {
            return Err(Error::ShapeMismatch(format!(
                "fusion expects {} input channels but U + Y carry {}",
                fusion.c_in(),
                sdc.c_in() + sdc.c_out()
            )));
        }
        if let Some(phi) = &phi {
            if (phi.kernel_h(), phi.kernel_w()) != (3, 3) {
                return Err(Error::InvalidShape("guidance projection must be 3x3".into()));
            }
        }
        Ok(Self { sdc, fusion, phi })
    }

    /// `α·U + β·Y` fusion around a channel-diagonal all-ones SDC kernel:
    /// exactly one explicit diffusion step per channel.
    pub fn diffusion_like(channels: usize, alpha: T, beta: T, lambda: f64, kernel: (usize, usize)) -> Result<Self> {
        let sdc = SdcKernel::diagonal(channels, kernel.0, kernel.1, T::one())?.with_lambda(lambda)?;
        Self::new(sdc, block_fusion(channels, alpha, beta)?, None)
    }

    pub fn fusion_weights(&self) -> &Tensor<T> {
        self.fusion.weights()
    }

    pub fn out_channels(&self) -> usize {
        self.fusion.c_out()
    }
}

/// `[α·I | β·I]` as `(C, 2C, 1, 1)` weights.
pub fn block_fusion<T: Scalar>(channels: usize, alpha: T, beta: T) -> Result<Tensor<T>> {
    let mut w = Tensor::zeros(vec![channels, 2 * channels, 1, 1])?;
    for c in 0..channels {
        w.data_mut()[c * 2 * channels + c] = alpha;
        w.data_mut()[c * 2 * channels + channels + c] = beta;
    }
    Ok(w)
}

/// One-channel SDN whose forward pass equals one explicit diffusion step with
/// weights `α`, `β`, diffusivity scale `λ` and the given window.
pub fn as_diffusion_step(alpha: f64, beta: f64, lambda: f64, kernel: (usize, usize)) -> Result<SdnParams> {
    SdnParams::diffusion_like(1, alpha, beta, lambda, kernel)
}

/// Aligns `a` and `b` spatially by upsampling whichever is smaller.
fn align<T: Scalar>(a: &FeatureMap<T>, b: &FeatureMap<T>) -> Result<(FeatureMap<T>, FeatureMap<T>)> {
    let ((ah, aw), (bh, bw)) = (a.spatial(), b.spatial());
    if (ah, aw) == (bh, bw) {
        Ok((a.clone(), b.clone()))
    } else if ah >= bh && aw >= bw {
        Ok((a.clone(), b.bilinear_upsample(ah, aw)?))
    } else if bh >= ah && bw >= aw {
        Ok((a.bilinear_upsample(bh, bw)?, b.clone()))
    } else {
        Err(Error::ShapeMismatch(format!("cannot align {ah}x{aw} with {bh}x{bw}")))
    }
}

/// `Conv1x1([U, Y])`, upsampling the smaller input first.
pub fn fuse<T: Scalar>(u: &FeatureMap<T>, y: &FeatureMap<T>, params: &SdnParams<T>) -> Result<FeatureMap<T>> {
    let (u, y) = align(u, y)?;
    let cat = concat_channels(&u, &y)?;
    if cat.channels() != params.fusion.c_in() {
        return Err(Error::ShapeMismatch(format!(
            "fusion expects {} channels, got {}",
            params.fusion.c_in(),
            cat.channels()
        )));
    }
    conv2d(&cat, &params.fusion)
}

/// `fuse(U, sdc2d(U, V↑, k))`, where `V↑` is `V` upsampled to `U`'s grid.
pub fn sdn_forward<T: Scalar>(u: &FeatureMap<T>, v: &FeatureMap<T>, params: &SdnParams<T>) -> Result<FeatureMap<T>> {
    let v = upsample_to(v, u.spatial())?;
    let y = sdc2d(u, &v, &params.sdc)?;
    fuse(u, &y, params)
}

pub(crate) fn upsample_to<T: Scalar>(v: &FeatureMap<T>, (h, w): (usize, usize)) -> Result<FeatureMap<T>> {
    if v.spatial() == (h, w) {
        Ok(v.clone())
    } else {
        v.bilinear_upsample(h, w)
    }
}

/// `Φ(F)`: stride-2 3×3 convolution, `ceil(H/2) × ceil(W/2)` output.
pub fn guidance_single_scale<T: Scalar>(f: &FeatureMap<T>, params: &SdnParams<T>) -> Result<FeatureMap<T>> {
    let phi = params
        .phi
        .as_ref()
        .ok_or_else(|| Error::InvalidParameter("SDN block has no guidance projection".into()))?;
    project_guidance(f, phi)
}

pub fn project_guidance<T: Scalar>(f: &FeatureMap<T>, phi: &SdcKernel<T>) -> Result<FeatureMap<T>> {
    conv2d_strided(f, phi, 2)
}

/// Backbone pyramid `F_1 .. F_L`, finest first.
#[derive(Clone, Debug, PartialEq)]
pub struct MultiScaleFeatures<T = f64>(Vec<FeatureMap<T>>);

impl<T: Scalar> MultiScaleFeatures<T> {
    pub fn new(stages: Vec<FeatureMap<T>>) -> Result<Self> {
        if stages.is_empty() {
            return Err(Error::InvalidParameter("pyramid needs at least one stage".into()));
        }
        for pair in stages.windows(2) {
            let ((h0, w0), (h1, w1)) = (pair[0].spatial(), pair[1].spatial());
            if h1 > h0 || w1 > w0 {
                return Err(Error::InvalidShape(format!(
                    "pyramid extents must not grow: {h0}x{w0} then {h1}x{w1}"
                )));
            }
        }
        Ok(Self(stages))
    }

    pub fn stages(&self) -> &[FeatureMap<T>] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Guidance for every stage: `F_{i+1}` for `i < L` and `Φ(F_L)` for the last,
/// each upsampled to its stage's extents.
pub fn guidance_multi_scale<T: Scalar>(feats: &MultiScaleFeatures<T>, phi: &SdcKernel<T>) -> Result<Vec<FeatureMap<T>>> {
    let stages = feats.stages();
    let last = stages.last().expect("validated non-empty");
    let top = project_guidance(last, phi)?;
    stages
        .iter()
        .enumerate()
        .map(|(i, f)| {
            let src = stages.get(i + 1).unwrap_or(&top);
            upsample_to(src, f.spatial())
        })
        .collect()
}

/// Per-stage SDN blocks; stages share the architecture but not parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct MultiScaleNeck<T = f64> {
    pub stages: Vec<SdnParams<T>>,
    pub phi: SdcKernel<T>,
}

impl<T: Scalar> MultiScaleNeck<T> {
    pub fn forward(&self, feats: &MultiScaleFeatures<T>) -> Result<Vec<FeatureMap<T>>> {
        if feats.len() != self.stages.len() {
            return Err(Error::ShapeMismatch(format!(
                "neck has {} stages, pyramid has {}",
                self.stages.len(),
                feats.len()
            )));
        }
        let guidance = guidance_multi_scale(feats, &self.phi)?;
        feats
            .stages()
            .iter()
            .zip(&guidance)
            .zip(&self.stages)
            .map(|((f, g), p)| sdn_forward(f, g, p))
            .collect()
    }
}

#[derive(Serialize, Deserialize, Debug, Clone, PartialEq)]
struct BlockEntry {
    name: String,
    shape: Vec<usize>,
    dilation: usize,
    lambda: f64,
}

#[derive(Serialize, Deserialize, Debug, Clone, PartialEq)]
struct Sidecar {
    format: String,
    blocks: Vec<BlockEntry>,
}

/// Writes `params` to `<stem>.tns` (one record per block) and `<stem>.json`
/// (block names, shapes and kernel geometry, in record order).
pub fn save_params(stem: impl AsRef<Path>, params: &SdnParams) -> Result<()> {
    let stem = stem.as_ref();
    let mut blocks = vec![("sdc", &params.sdc), ("fusion", &params.fusion)];
    if let Some(phi) = &params.phi {
        blocks.push(("phi", phi));
    }
    let sidecar = Sidecar {
        format: "TNS1".into(),
        blocks: blocks
            .iter()
            .map(|(name, k)| BlockEntry {
                name: (*name).into(),
                shape: k.weights().shape().to_vec(),
                dilation: k.dilation(),
                lambda: k.lambda(),
            })
            .collect(),
    };
    let tensors: Vec<&Tensor> = blocks.iter().map(|(_, k)| k.weights()).collect();
    save_tensors(stem.with_extension("tns"), &tensors)?;
    fs::write(stem.with_extension("json"), serde_json::to_string_pretty(&sidecar)? + "\n")?;
    Ok(())
}

pub fn load_params(stem: impl AsRef<Path>) -> Result<SdnParams> {
    let stem = stem.as_ref();
    let sidecar: Sidecar = serde_json::from_str(&fs::read_to_string(stem.with_extension("json"))?)?;
    let tensors = load_tensors(stem.with_extension("tns"))?;
    if tensors.len() != sidecar.blocks.len() {
        return Err(format_err("sdn params", "sidecar and tensor file disagree on block count"));
    }
    let mut sdc = None;
    let mut fusion = None;
    let mut phi = None;
    for (entry, t) in sidecar.blocks.into_iter().zip(tensors) {
        if entry.shape != t.shape() {
            return Err(format_err("sdn params", format!("block {} shape mismatch", entry.name)));
        }
        let k = SdcKernel::new(t, entry.dilation, entry.lambda)?;
        match entry.name.as_str() {
            "sdc" => sdc = Some(k),
            "fusion" => fusion = Some(k),
            "phi" => phi = Some(k),
            other => return Err(format_err("sdn params", format!("unknown block {other}"))),
        }
    }
    let sdc = sdc.ok_or_else(|| format_err("sdn params", "missing sdc block"))?;
    let fusion = fusion.ok_or_else(|| format_err("sdn params", "missing fusion block"))?;
    SdnParams::new(sdc, fusion.weights().clone(), phi)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::{diffuse, diffusion_step, DiffusionSchedule, DiffusivityConfig};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_map(rng: &mut ChaCha8Rng, c: usize, h: usize, w: usize) -> FeatureMap {
        FeatureMap::from_fn(c, h, w, |_, _, _| rng.gen_range(-1.0..1.0)).unwrap()
    }

    fn random_kernel(rng: &mut ChaCha8Rng, co: usize, ci: usize, k: usize) -> SdcKernel {
        let w = (0..co * ci * k * k).map(|_| rng.gen_range(-1.0..1.0)).collect();
        SdcKernel::new(Tensor::new(vec![co, ci, k, k], w).unwrap(), 1, 0.7).unwrap()
    }

    fn random_params(rng: &mut ChaCha8Rng, c: usize) -> SdnParams {
        let sdc = random_kernel(rng, c, c, 3);
        let fusion = random_kernel(rng, c, 2 * c, 1).weights().clone();
        SdnParams::new(sdc, fusion, Some(random_kernel(rng, c, c, 3))).unwrap()
    }

    #[test]
    fn fusion_channel_check() {
        let sdc = SdcKernel::<f64>::ones(2, 2, 3, 3).unwrap();
        assert!(SdnParams::new(sdc.clone(), Tensor::zeros(vec![2, 3, 1, 1]).unwrap(), None).is_err());
        assert!(SdnParams::new(sdc, Tensor::zeros(vec![2, 4, 1, 1]).unwrap(), None).is_ok());
    }

    #[test]
    fn block_fusion_is_weighted_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let u = random_map(&mut rng, 3, 5, 5);
        let y = random_map(&mut rng, 3, 5, 5);
        let p = SdnParams::diffusion_like(3, 0.5, 2.0, 1.0, (3, 3)).unwrap();
        let f = fuse(&u, &y, &p).unwrap();
        for i in 0..f.data().len() {
            assert_eq!(f.data()[i], 0.5 * u.data()[i] + 2.0 * y.data()[i]);
        }
    }

    #[test]
    fn zero_y_pass_through() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let u = random_map(&mut rng, 2, 4, 6);
        let p = SdnParams::diffusion_like(2, 1.0, 0.0, 1.0, (3, 3)).unwrap();
        assert_eq!(fuse(&u, &u.zeros_like(), &p).unwrap(), u);
    }

    #[test]
    fn fuse_upsamples_smaller_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let u = random_map(&mut rng, 1, 8, 8);
        let y = random_map(&mut rng, 1, 4, 4);
        let p = as_diffusion_step(1.0, 0.25, 1.0, (3, 3)).unwrap();
        let f = fuse(&u, &y, &p).unwrap();
        assert_eq!(f.dims(), (1, 8, 8));
        let y_up = y.bilinear_upsample(8, 8).unwrap();
        for i in 0..64 {
            assert_eq!(f.data()[i], u.data()[i] + 0.25 * y_up.data()[i]);
        }
        let f2 = fuse(&y, &u, &p).unwrap();
        assert_eq!(f2.dims(), (1, 8, 8));
    }

    #[test]
    fn constant_u_is_pointwise_linear() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let p = random_params(&mut rng, 2);
        let u = FeatureMap::from_fn(2, 5, 5, |c, _, _| [0.3, -0.8][c]).unwrap();
        let v = random_map(&mut rng, 2, 5, 5);
        let out = sdn_forward(&u, &v, &p).unwrap();
        let w = p.fusion_weights().data();
        for co in 0..2 {
            let expect = w[co * 4] * 0.3 + w[co * 4 + 1] * -0.8;
            assert!(out.channel(co).iter().all(|&x| (x - expect).abs() < 1e-15));
        }
    }

    #[test]
    fn diffusion_equivalence_impulse() {
        let u = FeatureMap::from_fn(1, 3, 3, |_, y, x| if (y, x) == (1, 1) { 1.0 } else { 0.0 }).unwrap();
        let v = FeatureMap::full(1, 3, 3, 0.0).unwrap();
        let p = as_diffusion_step(1.0, 1.0 / 9.0, 1.0, (3, 3)).unwrap();
        let out = sdn_forward(&u, &v, &p).unwrap();
        assert!((out.get(0, 1, 1) - 1.0 / 9.0).abs() < 1e-15);
        assert!((out.get(0, 0, 0) - 1.0 / 9.0).abs() < 1e-15);
    }

    #[test]
    fn identity_when_beta_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let u = random_map(&mut rng, 1, 6, 6);
        let v = random_map(&mut rng, 1, 6, 6);
        let p = as_diffusion_step(1.0, 0.0, 1.0, (3, 3)).unwrap();
        assert_eq!(sdn_forward(&u, &v, &p).unwrap(), u);
    }

    #[test]
    fn equivalence_and_chaining() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let cfg = DiffusivityConfig::new(1.0).unwrap();
        let p = as_diffusion_step(1.0, 1.0 / 9.0, 1.0, (3, 3)).unwrap();
        for _ in 0..20 {
            let u = random_map(&mut rng, 1, 8, 8);
            let v = random_map(&mut rng, 1, 8, 8);
            let reference = diffusion_step(&u, &v, &DiffusionSchedule::default(), &cfg).unwrap();
            assert!(sdn_forward(&u, &v, &p).unwrap().max_abs_diff(&reference).unwrap() <= 1e-12);
        }
        let u = random_map(&mut rng, 1, 8, 8);
        let v = random_map(&mut rng, 2, 8, 8);
        let mut chained = u.clone();
        for _ in 0..5 {
            chained = sdn_forward(&chained, &v, &p).unwrap();
        }
        let sched = DiffusionSchedule::new(5, 1.0, 1.0 / 9.0, (3, 3)).unwrap();
        assert!(chained.max_abs_diff(&diffuse(&u, &v, &sched, &cfg).unwrap()).unwrap() <= 1e-12);
    }

    #[test]
    fn multichannel_diffusion_like() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let u = random_map(&mut rng, 3, 6, 7);
        let v = random_map(&mut rng, 2, 6, 7);
        let p = SdnParams::diffusion_like(3, 0.9, 0.1, 0.5, (3, 3)).unwrap();
        let sched = DiffusionSchedule::new(1, 0.9, 0.1, (3, 3)).unwrap();
        let reference = diffusion_step(&u, &v, &sched, &DiffusivityConfig::new(0.5).unwrap()).unwrap();
        assert!(sdn_forward(&u, &v, &p).unwrap().max_abs_diff(&reference).unwrap() <= 1e-12);
    }

    #[test]
    fn output_extent_follows_u() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let p = random_params(&mut rng, 2);
        let u = random_map(&mut rng, 2, 9, 7);
        let v = random_map(&mut rng, 2, 5, 4);
        assert_eq!(sdn_forward(&u, &v, &p).unwrap().dims(), (2, 9, 7));
    }

    #[test]
    fn single_scale_guidance_extents() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let p = random_params(&mut rng, 2);
        assert_eq!(guidance_single_scale(&random_map(&mut rng, 2, 8, 8), &p).unwrap().spatial(), (4, 4));
        assert_eq!(guidance_single_scale(&random_map(&mut rng, 2, 7, 7), &p).unwrap().spatial(), (4, 4));
        let id = SdnParams { phi: Some(SdcKernel::identity(2, 3, 3).unwrap()), ..p.clone() };
        let g = guidance_single_scale(&FeatureMap::full(2, 6, 6, 0.4).unwrap(), &id).unwrap();
        assert!(g.data().iter().all(|&x| x == 0.4));
        let none = SdnParams { phi: None, ..p };
        assert!(guidance_single_scale(&FeatureMap::full(2, 6, 6, 0.4).unwrap(), &none).is_err());
    }

    fn pyramid(rng: &mut ChaCha8Rng, sides: &[usize]) -> MultiScaleFeatures {
        MultiScaleFeatures::new(sides.iter().map(|&s| random_map(rng, 2, s, s)).collect()).unwrap()
    }

    #[test]
    fn multi_scale_guidance_rules() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let phi = random_kernel(&mut rng, 2, 2, 3);
        let one = pyramid(&mut rng, &[8]);
        let g1 = guidance_multi_scale(&one, &phi).unwrap();
        let direct = project_guidance(&one.stages()[0], &phi).unwrap().bilinear_upsample(8, 8).unwrap();
        assert_eq!(g1, vec![direct]);

        let feats = pyramid(&mut rng, &[64, 32, 16, 8]);
        let g = guidance_multi_scale(&feats, &phi).unwrap();
        let sides: Vec<_> = g.iter().map(|m| m.spatial()).collect();
        assert_eq!(sides, vec![(64, 64), (32, 32), (16, 16), (8, 8)]);
        assert_eq!(g[0], feats.stages()[1].bilinear_upsample(64, 64).unwrap());
        assert_eq!(g[2], feats.stages()[3].bilinear_upsample(16, 16).unwrap());
        let top = project_guidance(&feats.stages()[3], &phi).unwrap();
        assert_eq!(top.spatial(), (4, 4));
        assert_eq!(g[3], top.bilinear_upsample(8, 8).unwrap());
    }

    #[test]
    fn pyramid_must_not_grow() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        assert!(MultiScaleFeatures::new(vec![random_map(&mut rng, 1, 4, 4), random_map(&mut rng, 1, 8, 8)]).is_err());
        assert!(MultiScaleFeatures::<f64>::new(vec![]).is_err());
    }

    #[test]
    fn stages_do_not_share_parameters() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let feats = pyramid(&mut rng, &[16, 8, 4]);
        let neck = MultiScaleNeck {
            stages: (0..3).map(|_| random_params(&mut rng, 2)).collect(),
            phi: random_kernel(&mut rng, 2, 2, 3),
        };
        let before = neck.forward(&feats).unwrap();
        let mut mutated = neck.clone();
        mutated.stages[1].sdc.weights_mut().data_mut()[0] += 1.0;
        mutated.stages[1].fusion.weights_mut().data_mut()[0] -= 0.5;
        let after = mutated.forward(&feats).unwrap();
        assert_eq!(before[0], after[0]);
        assert_eq!(before[2], after[2]);
        assert_ne!(before[1], after[1]);
    }

    #[test]
    fn params_roundtrip_through_tns_and_sidecar() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let p = random_params(&mut rng, 2);
        let p = SdnParams { sdc: p.sdc.with_dilation(2).unwrap(), ..p };
        let dir = tempfile::tempdir().unwrap();
        let stem = dir.path().join("neck");
        save_params(&stem, &p).unwrap();
        let json = std::fs::read_to_string(stem.with_extension("json")).unwrap();
        assert!(json.contains("\"sdc\"") && json.contains("\"fusion\"") && json.contains("\"phi\""));
        assert_eq!(load_params(&stem).unwrap(), p);
    }
}
