//! Compact scene representation: encode occupancy grids into triplane
//! latents via a small 3-D conv stack and axis-wise average pooling; decode
//! semantic logits at continuous points by bilinear plane sampling plus a
//! positional-encoded MLP. Includes the single-plane BEV ablation baseline.

pub mod lovasz;
pub mod train;

pub use lovasz::{lovasz_extension_oracle, lovasz_softmax_loss};
pub use train::{pretrain_codec, CodecTrainConfig, StepLog};

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::nn::{Conv3dLayer, Ctx, Linear, ParamStore, Scalar, Tensor, Var};
use crate::occ::{GridDims, ModelConfig, OccGrid, Triplane};

/// Hidden width of the point-decoder MLP (3 hidden layers).
pub const DECODER_WIDTH: usize = 128;

/// Which latent layout the codec produces.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LatentKind {
    /// Three orthogonal planes (xy, xz, yz).
    Triplane,
    /// Single bird's-eye plane; the ablation baseline.
    Bev,
}

/// Latent planes as graph nodes.
#[derive(Clone)]
pub enum LatentVar<S: Scalar> {
    Tri(TriVar<S>),
    Bev(Var<S>),
}

/// Triplane whose planes live in the op graph.
#[derive(Clone)]
pub struct TriVar<S: Scalar> {
    pub xy: Var<S>,
    pub xz: Var<S>,
    pub yz: Var<S>,
    pub dims: GridDims,
}

impl<S: Scalar> TriVar<S> {
    pub fn from_value(t: &Triplane<S>) -> Self {
        TriVar {
            xy: Var::constant(t.xy.clone()),
            xz: Var::constant(t.xz.clone()),
            yz: Var::constant(t.yz.clone()),
            dims: t.dims,
        }
    }

    pub fn value(&self) -> Triplane<S> {
        Triplane {
            xy: self.xy.value().clone(),
            xz: self.xz.value().clone(),
            yz: self.yz.value().clone(),
            dims: self.dims,
        }
    }

    pub fn planes(&self) -> [&Var<S>; 3] {
        [&self.xy, &self.xz, &self.yz]
    }
}

/// Latent planes as plain values (for caching and persistence).
#[derive(Clone, Debug)]
pub enum LatentValue<S: Scalar> {
    Tri(Triplane<S>),
    Bev(Tensor<S>),
}

impl<S: Scalar> LatentValue<S> {
    pub fn latent_size(&self) -> usize {
        match self {
            LatentValue::Tri(t) => t.latent_size(),
            LatentValue::Bev(p) => p.len(),
        }
    }

    pub fn as_vars(&self) -> LatentVar<S> {
        match self {
            LatentValue::Tri(t) => LatentVar::Tri(TriVar::from_value(t)),
            LatentValue::Bev(p) => LatentVar::Bev(Var::constant(p.clone())),
        }
    }
}

impl<S: Scalar> LatentVar<S> {
    pub fn value(&self) -> LatentValue<S> {
        match self {
            LatentVar::Tri(t) => LatentValue::Tri(t.value()),
            LatentVar::Bev(p) => LatentValue::Bev(p.value().clone()),
        }
    }
}

/// Codec architecture: parameter names and shapes. Values live in a
/// [`ParamStore`]; encoder parameters are prefixed `enc.`, decoder `dec.`.
#[derive(Clone, Debug)]
pub struct Codec {
    pub kind_is_bev: bool,
    pub dims: GridDims,
    /// Plane channel count.
    pub c: usize,
    pub ds: usize,
    pub num_categories: usize,
    pub n_freq: usize,
    enc1: Conv3dLayer,
    enc2: Conv3dLayer,
    dec: Vec<Linear>,
}

impl Codec {
    pub fn triplane(dims: GridDims, num_categories: usize, mc: &ModelConfig) -> Self {
        Self::build(dims, num_categories, mc.c, mc.ds, mc.n_freq, false)
    }

    /// BEV baseline; `c_bev` is chosen by the caller to match a latent
    /// budget.
    pub fn bev(dims: GridDims, num_categories: usize, mc: &ModelConfig, c_bev: usize) -> Self {
        Self::build(dims, num_categories, c_bev, mc.ds, mc.n_freq, true)
    }

    /// BEV channel count whose latent budget matches this triplane codec's.
    pub fn matched_bev_channels(dims: GridDims, c: usize, ds: usize) -> usize {
        let shapes = Triplane::<f32>::plane_shapes(dims, c, ds);
        let total: usize = shapes.iter().map(|s| s.iter().product::<usize>()).sum();
        let bev_cells = (dims.w / ds) * (dims.l / ds);
        (total + bev_cells / 2) / bev_cells
    }

    fn build(
        dims: GridDims,
        num_categories: usize,
        c: usize,
        ds: usize,
        n_freq: usize,
        bev: bool,
    ) -> Self {
        let c_mid = (2 * c).max(8);
        let pe_dim = 3 * 2 * n_freq;
        let din = c + pe_dim;
        let mut dec = Vec::new();
        let widths = [din, DECODER_WIDTH, DECODER_WIDTH, DECODER_WIDTH, num_categories];
        for i in 0..4 {
            dec.push(Linear::new(format!("dec.fc{}", i + 1), widths[i], widths[i + 1]));
        }
        Codec {
            kind_is_bev: bev,
            dims,
            c,
            ds,
            num_categories,
            n_freq,
            enc1: Conv3dLayer::new("enc.conv1", num_categories, c_mid, 3, [1, ds, ds], [1, 1, 1]),
            enc2: Conv3dLayer::new("enc.conv2", c_mid, c, 3, [1, 1, 1], [1, 1, 1]),
            dec,
        }
    }

    pub fn kind(&self) -> LatentKind {
        if self.kind_is_bev {
            LatentKind::Bev
        } else {
            LatentKind::Triplane
        }
    }

    pub fn init_params<S: Scalar>(&self, seed: u64) -> ParamStore<S> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        self.enc1.register(&mut store, &mut rng);
        self.enc2.register(&mut store, &mut rng);
        for l in &self.dec {
            l.register(&mut store, &mut rng);
        }
        store
    }

    fn check_grid(&self, grid: &OccGrid) -> Result<()> {
        if grid.dims() != self.dims {
            return Err(Error::shape(format!(
                "grid dims {:?} vs codec {:?}",
                grid.dims(),
                self.dims
            )));
        }
        if grid.num_categories != self.num_categories {
            return Err(Error::shape("category count mismatch"));
        }
        if self.dims.w % self.ds != 0 || self.dims.l % self.ds != 0 {
            return Err(Error::shape(format!(
                "grid (w={}, l={}) not divisible by ds={}",
                self.dims.w, self.dims.l, self.ds
            )));
        }
        Ok(())
    }

    /// One-hot label volume `[K, h, w, l]`.
    fn one_hot<S: Scalar>(&self, grid: &OccGrid) -> Tensor<S> {
        let d = self.dims;
        let mut data = vec![S::ZERO; self.num_categories * d.voxels()];
        let plane = d.voxels();
        let mut i = 0;
        for x in 0..d.w {
            for y in 0..d.l {
                for z in 0..d.h {
                    let cat = grid.labels()[i] as usize;
                    data[cat * plane + (z * d.w + x) * d.l + y] = S::ONE;
                    i += 1;
                }
            }
        }
        Tensor::raw(&[self.num_categories, d.h, d.w, d.l], data)
    }

    /// Encode a grid into latent planes: one-hot embed, two 3-D convs
    /// (the first strided on w and l), then axis-wise average pooling.
    pub fn encode_vars<S: Scalar>(&self, ctx: &Ctx<S>, grid: &OccGrid) -> Result<LatentVar<S>> {
        self.check_grid(grid)?;
        let vol = Var::constant(self.one_hot(grid));
        let h = self.enc1.forward(ctx, &vol).gelu();
        let vol = self.enc2.forward(ctx, &h); // [c, h, w', l']
        Ok(if self.kind_is_bev {
            LatentVar::Bev(vol.mean_axis(1))
        } else {
            LatentVar::Tri(TriVar {
                xy: vol.mean_axis(1),
                xz: vol.mean_axis(3),
                yz: vol.mean_axis(2),
                dims: self.dims,
            })
        })
    }

    /// Frozen-parameter encode.
    pub fn encode<S: Scalar>(&self, store: &ParamStore<S>, grid: &OccGrid) -> Result<LatentValue<S>> {
        let ctx = Ctx::frozen(store);
        Ok(self.encode_vars(&ctx, grid)?.value())
    }

    /// Frozen-parameter triplane encode; errors on a BEV codec.
    pub fn encode_triplane<S: Scalar>(
        &self,
        store: &ParamStore<S>,
        grid: &OccGrid,
    ) -> Result<Triplane<S>> {
        match self.encode(store, grid)? {
            LatentValue::Tri(t) => Ok(t),
            LatentValue::Bev(_) => Err(Error::config("BEV codec produces no triplane")),
        }
    }

    fn check_points(&self, pts: &[(f64, f64, f64)]) -> Result<()> {
        let d = self.dims;
        for (i, &(x, y, z)) in pts.iter().enumerate() {
            let ok = x >= -0.5
                && x <= d.w as f64 - 0.5
                && y >= -0.5
                && y <= d.l as f64 - 0.5
                && z >= -0.5
                && z <= d.h as f64 - 0.5;
            if !ok {
                return Err(Error::data(format!(
                    "point {i} ({x}, {y}, {z}) outside grid bounds"
                )));
            }
        }
        Ok(())
    }

    /// Positional encoding rows for voxel-coordinate points: sin/cos at
    /// `n_freq` octaves per axis, coordinates normalized to [-1, 1].
    fn positional_encoding<S: Scalar>(&self, pts: &[(f64, f64, f64)]) -> Tensor<S> {
        let d = self.dims;
        let per_axis = 2 * self.n_freq;
        let width = 3 * per_axis;
        let mut data = Vec::with_capacity(pts.len() * width);
        let norm = |v: f64, extent: usize| 2.0 * v / (extent as f64 - 1.0) - 1.0;
        for &(x, y, z) in pts {
            for (v, extent) in [(x, d.w), (y, d.l), (z, d.h)] {
                let nv = norm(v, extent);
                for f in 0..self.n_freq {
                    let arg = std::f64::consts::PI * (1u64 << f) as f64 * nv;
                    data.push(S::from_f64(arg.sin()));
                    data.push(S::from_f64(arg.cos()));
                }
            }
        }
        Tensor::raw(&[pts.len(), width], data)
    }

    /// Decode semantic logits at continuous voxel-coordinate points:
    /// bilinear-sample each plane at its 2-D projection (w/l scaled by
    /// 1/ds), sum the plane features, concatenate the positional encoding,
    /// and run the decoder MLP.
    pub fn decode_points_vars<S: Scalar>(
        &self,
        ctx: &Ctx<S>,
        latent: &LatentVar<S>,
        pts: &[(f64, f64, f64)],
    ) -> Result<Var<S>> {
        self.check_points(pts)?;
        let ds = self.ds as f64;
        let feat = match latent {
            LatentVar::Tri(tri) => {
                let p_xy: Arc<Vec<(f64, f64)>> =
                    Arc::new(pts.iter().map(|&(x, y, _)| (x / ds, y / ds)).collect());
                let p_xz: Arc<Vec<(f64, f64)>> =
                    Arc::new(pts.iter().map(|&(x, _, z)| (z, x / ds)).collect());
                let p_yz: Arc<Vec<(f64, f64)>> =
                    Arc::new(pts.iter().map(|&(_, y, z)| (z, y / ds)).collect());
                let sxy = tri.xy.bilinear_plane(&p_xy);
                let sxz = tri.xz.bilinear_plane(&p_xz);
                let syz = tri.yz.bilinear_plane(&p_yz);
                sxy.add(&sxz).add(&syz)
            }
            LatentVar::Bev(plane) => {
                let p_xy: Arc<Vec<(f64, f64)>> =
                    Arc::new(pts.iter().map(|&(x, y, _)| (x / ds, y / ds)).collect());
                plane.bilinear_plane(&p_xy)
            }
        };
        let pe = Var::constant(self.positional_encoding::<S>(pts));
        let mut x = Var::concat(&[feat, pe], 1);
        for (i, l) in self.dec.iter().enumerate() {
            x = l.forward(ctx, &x);
            if i + 1 < self.dec.len() {
                x = x.gelu();
            }
        }
        Ok(x)
    }

    /// Logits at a single point with frozen parameters.
    pub fn decode_point<S: Scalar>(
        &self,
        store: &ParamStore<S>,
        latent: &LatentValue<S>,
        pos: (f64, f64, f64),
    ) -> Result<Tensor<S>> {
        let ctx = Ctx::frozen(store);
        let out = self.decode_points_vars(&ctx, &latent.as_vars(), &[pos])?;
        out.value().reshaped(&[self.num_categories])
    }

    /// Decode the full grid: argmax logits at every voxel center, ties
    /// broken toward the lowest category id.
    pub fn decode_grid<S: Scalar>(
        &self,
        store: &ParamStore<S>,
        latent: &LatentValue<S>,
    ) -> Result<OccGrid> {
        let d = self.dims;
        let ctx = Ctx::frozen(store);
        let latent = latent.as_vars();
        let mut labels = vec![0u8; d.voxels()];
        let all: Vec<(f64, f64, f64)> = (0..d.voxels())
            .map(|i| {
                let z = i % d.h;
                let y = (i / d.h) % d.l;
                let x = i / (d.h * d.l);
                (x as f64, y as f64, z as f64)
            })
            .collect();
        let k = self.num_categories;
        for (chunk_idx, chunk) in all.chunks(8192).enumerate() {
            let logits = self.decode_points_vars(&ctx, &latent, chunk)?;
            let data = logits.value().data();
            for (r, row) in data.chunks_exact(k).enumerate() {
                let mut best = 0usize;
                for (j, &v) in row.iter().enumerate().skip(1) {
                    if v > row[best] {
                        best = j;
                    }
                }
                labels[chunk_idx * 8192 + r] = best as u8;
            }
        }
        OccGrid::new(d, 0.4, k, labels).map_err(|e| e)
    }
}

/// Codec objective on decoded logits: mean cross-entropy plus
/// `lambda` x Lovasz-softmax.
pub fn codec_loss<S: Scalar>(logits: &Var<S>, labels: &[usize], lambda: f64) -> Result<Var<S>> {
    let ce = logits.cross_entropy_mean(labels);
    if lambda == 0.0 {
        return Ok(ce);
    }
    let lz = lovasz_softmax_loss(&logits.softmax_rows(), labels)?;
    Ok(ce.add(&lz.scale(S::from_f64(lambda))))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::occ::DESK_CATEGORIES;
    use crate::synth::{generate_scene, SceneConfig};

    fn desk_codec() -> (Codec, ParamStore<f64>, OccGrid) {
        let mc = ModelConfig::default();
        let seq = generate_scene(&SceneConfig {
            seed: 2,
            frames: 2,
            ..SceneConfig::default()
        })
        .unwrap();
        let grid = seq.grids[0].clone();
        let codec = Codec::triplane(grid.dims(), DESK_CATEGORIES, &mc);
        let store = codec.init_params::<f64>(1);
        (codec, store, grid)
    }

    #[test]
    fn encode_shapes_desk_scale() {
        let (codec, store, grid) = desk_codec();
        let tri = codec.encode_triplane(&store, &grid).unwrap();
        tri.check_shapes(8, 2).unwrap();
        assert_eq!(tri.latent_size(), 16_384);
        assert!(tri.xy.all_finite() && tri.xz.all_finite() && tri.yz.all_finite());
    }

    #[test]
    fn encode_full_scale_latent_size() {
        // latent size formula (h*w + h*l + w*l) * c at the full-scale shape
        let dims = GridDims { h: 16, w: 200, l: 200 };
        let shapes = Triplane::<f32>::plane_shapes(dims, 8, 2);
        let total: usize = shapes.iter().map(|s| s.iter().product::<usize>()).sum();
        assert_eq!(total, 105_600);
    }

    #[test]
    fn all_free_grid_encodes_finite() {
        let (codec, store, _) = desk_codec();
        let grid = OccGrid::filled(codec.dims, 0.4, DESK_CATEGORIES, 0).unwrap();
        let tri = codec.encode_triplane(&store, &grid).unwrap();
        assert!(tri.xy.all_finite());
        tri.check_shapes(8, 2).unwrap();
    }

    #[test]
    fn encode_rejects_indivisible_dims() {
        let mc = ModelConfig {
            ds: 3,
            ..ModelConfig::default()
        };
        let codec = Codec::triplane(GridDims { h: 4, w: 8, l: 8 }, 3, &mc);
        let store = codec.init_params::<f64>(0);
        let grid = OccGrid::filled(GridDims { h: 4, w: 8, l: 8 }, 0.4, 3, 0).unwrap();
        assert!(codec.encode(&store, &grid).is_err());
    }

    #[test]
    fn zero_planes_zero_final_layer_gives_zero_logits() {
        let (codec, mut store, _) = desk_codec();
        store.set_value("dec.fc4.w", Tensor::zeros(&[DECODER_WIDTH, DESK_CATEGORIES]));
        let tri = Triplane {
            xy: Tensor::zeros(&[8, 32, 32]),
            xz: Tensor::zeros(&[8, 16, 32]),
            yz: Tensor::zeros(&[8, 16, 32]),
            dims: codec.dims,
        };
        let logits = codec
            .decode_point(&store, &LatentValue::Tri(tri), (3.0, 4.0, 5.0))
            .unwrap();
        assert!(logits.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn decode_rejects_out_of_bounds() {
        let (codec, store, grid) = desk_codec();
        let latent = codec.encode(&store, &grid).unwrap();
        assert!(codec.decode_point(&store, &latent, (64.0, 0.0, 0.0)).is_err());
        assert!(codec.decode_point(&store, &latent, (-1.0, 0.0, 0.0)).is_err());
    }

    #[test]
    fn decode_grid_consistent_with_decode_point() {
        let (codec, store, grid) = desk_codec();
        let latent = codec.encode(&store, &grid).unwrap();
        let decoded = codec.decode_grid(&store, &latent).unwrap();
        // spot-check 100 voxels
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        use rand::Rng;
        for _ in 0..100 {
            let x = rng.gen_range(0..64);
            let y = rng.gen_range(0..64);
            let z = rng.gen_range(0..16);
            let logits = codec
                .decode_point(&store, &latent, (x as f64, y as f64, z as f64))
                .unwrap();
            let mut best = 0;
            for (j, &v) in logits.data().iter().enumerate().skip(1) {
                if v > logits.data()[best] {
                    best = j;
                }
            }
            assert_eq!(decoded.get(x, y, z), best as u8);
        }
        assert_eq!(decoded.dims(), grid.dims());
    }

    #[test]
    fn decode_is_continuous_in_pos() {
        let (codec, store, grid) = desk_codec();
        let latent = codec.encode(&store, &grid).unwrap();
        let base = (10.3, 20.7, 5.2);
        let l0 = codec.decode_point(&store, &latent, base).unwrap();
        let l1 = codec
            .decode_point(&store, &latent, (base.0 + 1e-4, base.1 + 1e-4, base.2 + 1e-4))
            .unwrap();
        for (a, b) in l0.data().iter().zip(l1.data()) {
            assert!((a - b).abs() < 1e-2, "{a} vs {b}");
        }
    }

    #[test]
    fn bev_latent_budget_matching() {
        // desk: triplane budget 16384 over a 32x32 BEV plane -> 16 channels
        assert_eq!(Codec::matched_bev_channels(crate::occ::DESK_DIMS, 8, 2), 16);
        // full scale: 105600 over 100x100 -> 10.56 -> rounds to 11
        let dims = GridDims { h: 16, w: 200, l: 200 };
        assert_eq!(Codec::matched_bev_channels(dims, 8, 2), 11);
        // BEV shape contract at desk scale with 8 channels -> 8192 values
        let mc = ModelConfig::default();
        let codec = Codec::bev(crate::occ::DESK_DIMS, DESK_CATEGORIES, &mc, 8);
        let store = codec.init_params::<f32>(0);
        let grid = OccGrid::filled(crate::occ::DESK_DIMS, 0.4, DESK_CATEGORIES, 0).unwrap();
        match codec.encode(&store, &grid).unwrap() {
            LatentValue::Bev(p) => assert_eq!(p.len(), 8192),
            _ => panic!("expected BEV latent"),
        }
    }

    #[test]
    fn codec_loss_components() {
        // lambda = 0 reduces to plain cross-entropy
        let logits = Var::leaf(Tensor::new(&[2, 3], vec![2.0, 0.0, -1.0, 0.5, 1.5, 0.0]).unwrap());
        let labels = [0usize, 1];
        let ce_only = codec_loss(&logits, &labels, 0.0).unwrap();
        let ce = logits.cross_entropy_mean(&labels);
        assert_eq!(ce_only.value().item(), ce.value().item());
        // random case = CE + lambda * lovasz computed independently
        let both = codec_loss(&logits, &labels, 0.7).unwrap();
        let lz = lovasz_softmax_loss(&logits.softmax_rows(), &labels).unwrap();
        let want = ce.value().item() + 0.7 * lz.value().item();
        assert!((both.value().item() - want).abs() < 1e-12);
    }

    use rand_chacha::ChaCha8Rng;
    use rand::SeedableRng;
}
