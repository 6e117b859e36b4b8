//! Landmark branch: node features, adaptive fusion with the inpainting
//! feature, point regression and rasterization into the 68-channel map.

use facefill_autodiff::{ConvGeom, Real, Tensor, Var};

use crate::data::{LandmarkSet, NUM_LANDMARKS};
use crate::error::{Error, Result};
use crate::network::layers::{conv, ConvSpec, LEAKY};
use crate::network::{Ctx, GeneratorConfig, Init, Rounding};

fn pointwise(cin: usize, cout: usize) -> ConvSpec {
    ConvSpec::new(cin, cout, 1, ConvGeom::new(1, 0, 1))
}

/// The three pooled node vectors `[n, len]` in order node2, node3, node4.
///
/// P1 widens `f_share` with a 1×1 convolution. P4 and P3 reduce P1's output
/// to two different widths and pool; P3 finishes with a channel-wise PReLU.
/// P2 reduces and pools `f_share` directly.
pub fn extract_nodes<T: Real>(ctx: &mut Ctx<T>, cfg: &GeneratorConfig, f_share: Var) -> Result<[Var; 3]> {
    let c = cfg.encoder_channels();
    let [w2, w3, w4] = cfg.node_widths();
    let p1 = conv(ctx, f_share, "lmk.p1", pointwise(c, cfg.p1_channels()).act(LEAKY))?;

    let p4 = conv(ctx, p1, "lmk.p4", pointwise(cfg.p1_channels(), w4).act(LEAKY))?;
    let node4 = ctx.g.global_avg_pool(p4)?;

    let p3 = conv(ctx, p1, "lmk.p3", pointwise(cfg.p1_channels(), w3))?;
    let p3 = ctx.g.global_avg_pool(p3)?;
    let slope = ctx.param("lmk.p3.slope", &[w3], Init::Const(0.25))?;
    let node3 = ctx.g.prelu(p3, slope)?;

    let p2 = conv(ctx, f_share, "lmk.p2", pointwise(c, w2).act(LEAKY))?;
    let node2 = ctx.g.global_avg_pool(p2)?;
    Ok([node2, node3, node4])
}

/// `Concat(node2, node3, node4)` along the feature axis.
pub fn concat_nodes<T: Real>(ctx: &mut Ctx<T>, nodes: [Var; 3]) -> Result<Var> {
    Ok(ctx.g.concat(&nodes, 1)?)
}

/// `f_lmk + γ · proj(GAP(f̃1))`, with `γ` a trainable scalar starting at 0.
pub fn adaptive_fuse<T: Real>(ctx: &mut Ctx<T>, cfg: &GeneratorConfig, f_lmk: Var, f1: Var) -> Result<Var> {
    let d = cfg.landmark_dim();
    if ctx.g.shape(f_lmk).get(1) != Some(&d) {
        return Err(Error::Config(format!("landmark vector {:?} does not have length {d}", ctx.g.shape(f_lmk))));
    }
    let c1 = 2 * cfg.base_channels;
    let pooled = ctx.g.global_avg_pool(f1)?;
    let w = ctx.param("lmk.proj.weight", &[d, c1], Init::Kaiming { fan_in: c1, gain: 1.0 })?;
    let b = ctx.param("lmk.proj.bias", &[d], Init::Const(0.0))?;
    let proj = ctx.g.linear(pooled, w, Some(b))?;
    let gamma = ctx.param("lmk.gamma", &[1], Init::Const(0.0))?;
    let scaled = ctx.g.scale_by(proj, gamma)?;
    Ok(ctx.g.add(f_lmk, scaled)?)
}

/// Fully-connected regression to `[n, 136]` interleaved `x, y` pixel
/// coordinates.
pub fn predict_points<T: Real>(ctx: &mut Ctx<T>, cfg: &GeneratorConfig, fused: Var) -> Result<Var> {
    let d = cfg.landmark_dim();
    let w = ctx.param("lmk.fc.weight", &[2 * NUM_LANDMARKS, d], Init::Kaiming { fan_in: d, gain: 1.0 })?;
    let b = ctx.param("lmk.fc.bias", &[2 * NUM_LANDMARKS], Init::Const(0.0))?;
    Ok(ctx.g.linear(fused, w, Some(b))?)
}

/// The whole branch from `f_share` and the first fusion output to points.
pub fn landmark_head<T: Real>(ctx: &mut Ctx<T>, cfg: &GeneratorConfig, f_share: Var, f1: Var) -> Result<Var> {
    let nodes = extract_nodes(ctx, cfg, f_share)?;
    let f_lmk = concat_nodes(ctx, nodes)?;
    let fused = adaptive_fuse(ctx, cfg, f_lmk, f1)?;
    predict_points(ctx, cfg, fused)
}

/// One hot cell per landmark channel, or none when the point falls outside
/// the map. Cells are `(row, col)`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LandmarkMap {
    side: usize,
    cells: Vec<Option<(usize, usize)>>,
}

impl LandmarkMap {
    pub fn side(&self) -> usize {
        self.side
    }

    pub fn cells(&self) -> &[Option<(usize, usize)>] {
        &self.cells
    }

    /// Number of ones in the map.
    pub fn count(&self) -> usize {
        self.cells.iter().flatten().count()
    }

    /// Dense `[68, side, side]` values, indexed `[i][row][col]`.
    pub fn to_dense<T: Real>(&self) -> Vec<T> {
        let s2 = self.side * self.side;
        let mut out = vec![T::zero(); self.cells.len() * s2];
        for (i, cell) in self.cells.iter().enumerate() {
            if let Some((r, c)) = cell {
                out[i * s2 + r * self.side + c] = T::one();
            }
        }
        out
    }
}

fn cell_index(v: f64, mode: Rounding) -> f64 {
    match mode {
        Rounding::Floor => v.floor(),
        Rounding::Round => v.round(),
    }
}

fn rasterize_coords(coords: impl Iterator<Item = (f64, f64)>, alpha: f64, side: usize, mode: Rounding) -> LandmarkMap {
    let inside = |v: f64| v >= 0.0 && v < side as f64;
    let cells = coords
        .map(|(x, y)| {
            let p = cell_index(alpha * x, mode);
            let q = cell_index(alpha * y, mode);
            (inside(p) && inside(q)).then_some((q as usize, p as usize))
        })
        .collect();
    LandmarkMap { side, cells }
}

/// Sets `v[i][q][p] = 1` for `p = [αx_i]`, `q = [αy_i]` (x is the column,
/// y the row). Points landing outside `[0,side)²` leave their channel empty.
pub fn rasterize_landmarks(pts: &LandmarkSet, alpha: f64, side: usize, mode: Rounding) -> LandmarkMap {
    rasterize_coords(pts.points().iter().map(|p| (p[0] as f64, p[1] as f64)), alpha, side, mode)
}

/// `[n, 136]` predicted coordinates to a `[n, 68, S, S]` map. Non-finite
/// predictions count as out of bounds.
pub fn rasterize_batch<T: Real>(points: &Tensor<T>, cfg: &GeneratorConfig) -> Result<Tensor<T>> {
    let [n, k] = points.shape() else {
        return Err(Error::Argument(format!("points tensor {:?}", points.shape())));
    };
    if *k != 2 * NUM_LANDMARKS {
        return Err(Error::Argument(format!("points tensor {:?}", points.shape())));
    }
    let side = cfg.map_side();
    let mut out = Vec::with_capacity(n * NUM_LANDMARKS * side * side);
    for row in points.data().chunks(*k) {
        let coords = row.chunks(2).map(|p| (p[0].as_f64(), p[1].as_f64()));
        out.extend(rasterize_coords(coords, cfg.landmark_alpha, side, cfg.rasterize).to_dense::<T>());
    }
    Ok(Tensor::new(&[*n, NUM_LANDMARKS, side, side], out)?)
}
