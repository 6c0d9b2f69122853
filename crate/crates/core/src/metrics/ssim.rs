use jscc_autodiff::{Graph, NodeId, Scalar, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Windowed SSIM settings.
///
/// `C1 = (K1·L)²`, `C2 = (K2·L)²`, `C3 = C2/2`; the exponents of the
/// luminance, contrast and structure terms are all 1.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SsimParams {
    /// Odd side length of the Gaussian window.
    pub window_size: usize,
    /// Standard deviation of the window, in pixels.
    pub window_sigma: f64,
    /// Dynamic range `L` of pixel values.
    pub dynamic_range: f64,
    pub k1: f64,
    pub k2: f64,
}

impl Default for SsimParams {
    fn default() -> Self {
        Self {
            window_size: 11,
            window_sigma: 1.5,
            dynamic_range: 1.0,
            k1: 0.01,
            k2: 0.03,
        }
    }
}

impl SsimParams {
    pub fn c1(&self) -> f64 {
        (self.k1 * self.dynamic_range).powi(2)
    }

    pub fn c2(&self) -> f64 {
        (self.k2 * self.dynamic_range).powi(2)
    }

    pub fn c3(&self) -> f64 {
        self.c2() / 2.0
    }

    pub fn validate(&self) -> Result<()> {
        if self.window_size == 0 || self.window_size % 2 == 0 {
            return Err(Error::Config(format!("SSIM window size must be odd, got {}", self.window_size)));
        }
        if !(self.window_sigma > 0.0) || !(self.dynamic_range > 0.0) || !(self.k1 > 0.0) || !(self.k2 > 0.0) {
            return Err(Error::Config(format!("SSIM constants must be positive: {self:?}")));
        }
        Ok(())
    }

    /// Normalized 1-D Gaussian taps; the 2-D window is their outer product.
    pub fn taps(&self) -> Vec<f64> {
        let mid = (self.window_size / 2) as f64;
        let raw: Vec<f64> = (0..self.window_size)
            .map(|i| (-((i as f64 - mid).powi(2)) / (2.0 * self.window_sigma.powi(2))).exp())
            .collect();
        let total: f64 = raw.iter().sum();
        raw.into_iter().map(|v| v / total).collect()
    }
}

struct StatNodes {
    mu_x: NodeId,
    mu_y: NodeId,
    var_x: NodeId,
    var_y: NodeId,
    cov_xy: NodeId,
}

fn stat_nodes<T: Scalar>(g: &mut Graph<T>, x: NodeId, y: NodeId, params: &SsimParams) -> Result<StatNodes> {
    params.validate()?;
    let (sx, sy) = (g.shape(x).to_vec(), g.shape(y).to_vec());
    if sx != sy {
        return Err(Error::Config(format!("SSIM inputs differ in shape: {sx:?} vs {sy:?}")));
    }
    if sx.len() != 4 {
        return Err(Error::Config(format!("SSIM expects [B, C, H, W] images, got {sx:?}")));
    }
    if params.window_size > sx[2] || params.window_size > sx[3] {
        return Err(Error::Config(format!(
            "SSIM window of {} px exceeds the {}x{} image; use a smaller window",
            params.window_size, sx[2], sx[3]
        )));
    }
    let taps: Vec<T> = params.taps().into_iter().map(T::from_f64_lossy).collect();
    let mu_x = g.window_filter(x, &taps)?;
    let mu_y = g.window_filter(y, &taps)?;
    let xx = g.mul(x, x)?;
    let yy = g.mul(y, y)?;
    let xy = g.mul(x, y)?;
    let e_xx = g.window_filter(xx, &taps)?;
    let e_yy = g.window_filter(yy, &taps)?;
    let e_xy = g.window_filter(xy, &taps)?;
    let mu_xx = g.mul(mu_x, mu_x)?;
    let mu_yy = g.mul(mu_y, mu_y)?;
    let mu_xy = g.mul(mu_x, mu_y)?;
    Ok(StatNodes {
        mu_x,
        mu_y,
        var_x: g.sub(e_xx, mu_xx)?,
        var_y: g.sub(e_yy, mu_yy)?,
        cov_xy: g.sub(e_xy, mu_xy)?,
    })
}

/// Per-window, per-channel SSIM map `[B, C, H-w+1, W-w+1]`.
///
/// With `C3 = C2/2` the product of the contrast and structure terms equals
/// `(2σxy + C2) / (σx² + σy² + C2)`, which avoids square roots of local
/// variances and keeps the map differentiable where a window is flat.
pub fn ssim_map<T: Scalar>(g: &mut Graph<T>, x: NodeId, y: NodeId, params: &SsimParams) -> Result<NodeId> {
    let s = stat_nodes(g, x, y, params)?;
    let two = T::from_f64_lossy(2.0);
    let c1 = T::from_f64_lossy(params.c1());
    let c2 = T::from_f64_lossy(params.c2());

    let mu_xy = g.mul(s.mu_x, s.mu_y)?;
    let l_num = g.scale(mu_xy, two)?;
    let l_num = g.add_scalar(l_num, c1)?;
    let mx2 = g.mul(s.mu_x, s.mu_x)?;
    let my2 = g.mul(s.mu_y, s.mu_y)?;
    let l_den = g.add(mx2, my2)?;
    let l_den = g.add_scalar(l_den, c1)?;
    let luminance = g.div(l_num, l_den)?;

    let cs_num = g.scale(s.cov_xy, two)?;
    let cs_num = g.add_scalar(cs_num, c2)?;
    let cs_den = g.add(s.var_x, s.var_y)?;
    let cs_den = g.add_scalar(cs_den, c2)?;
    let contrast_structure = g.div(cs_num, cs_den)?;

    Ok(g.mul(luminance, contrast_structure)?)
}

/// Mean SSIM over all window positions, channels and batch items.
pub fn ssim_node<T: Scalar>(g: &mut Graph<T>, x: NodeId, y: NodeId, params: &SsimParams) -> Result<NodeId> {
    let map = ssim_map(g, x, y, params)?;
    Ok(g.mean(map)?)
}

/// SSIM of each batch item, `[B]`.
pub fn ssim_per_image<T: Scalar>(g: &mut Graph<T>, x: NodeId, y: NodeId, params: &SsimParams) -> Result<NodeId> {
    let map = ssim_map(g, x, y, params)?;
    Ok(g.mean_rows(map)?)
}

fn as_batch<T: Scalar>(t: &Tensor<T>) -> Result<Tensor<T>> {
    match t.shape().len() {
        4 => Ok(t.clone()),
        3 => {
            let s = t.shape();
            Ok(t.clone().reshaped(&[1, s[0], s[1], s[2]])?)
        }
        _ => Err(Error::Config(format!("expected a [C,H,W] or [B,C,H,W] image, got {:?}", t.shape()))),
    }
}

/// SSIM between two images (`[C, H, W]`) or batches (`[B, C, H, W]`).
pub fn ssim<T: Scalar>(x: &Tensor<T>, y: &Tensor<T>, params: &SsimParams) -> Result<f64> {
    let mut g = Graph::new(0);
    let xi = g.input("x", as_batch(x)?)?;
    let yi = g.input("y", as_batch(y)?)?;
    let s = ssim_node(&mut g, xi, yi, params)?;
    Ok(g.value(s).data()[0].as_f64())
}

/// Local Gaussian-window statistics, one entry per window position and
/// channel, laid out like the SSIM map.
#[derive(Clone, Debug, PartialEq)]
pub struct WindowStats {
    pub shape: Vec<usize>,
    pub mu_x: Vec<f64>,
    pub mu_y: Vec<f64>,
    pub sigma_x: Vec<f64>,
    pub sigma_y: Vec<f64>,
    pub sigma_xy: Vec<f64>,
}

pub fn window_stats(x: &Tensor<f64>, y: &Tensor<f64>, params: &SsimParams) -> Result<WindowStats> {
    let mut g = Graph::new(0);
    let xi = g.input("x", as_batch(x)?)?;
    let yi = g.input("y", as_batch(y)?)?;
    let s = stat_nodes(&mut g, xi, yi, params)?;
    let std = |id: NodeId| g.value(id).data().iter().map(|v| v.max(0.0).sqrt()).collect();
    Ok(WindowStats {
        shape: g.shape(s.mu_x).to_vec(),
        mu_x: g.value(s.mu_x).data().to_vec(),
        mu_y: g.value(s.mu_y).data().to_vec(),
        sigma_x: std(s.var_x),
        sigma_y: std(s.var_y),
        sigma_xy: g.value(s.cov_xy).data().to_vec(),
    })
}

/// Separate luminance, contrast and structure maps.
pub fn ssim_components(stats: &WindowStats, params: &SsimParams) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let (c1, c2, c3) = (params.c1(), params.c2(), params.c3());
    let n = stats.mu_x.len();
    let mut l = Vec::with_capacity(n);
    let mut c = Vec::with_capacity(n);
    let mut s = Vec::with_capacity(n);
    for i in 0..n {
        let (mx, my) = (stats.mu_x[i], stats.mu_y[i]);
        let (sx, sy, sxy) = (stats.sigma_x[i], stats.sigma_y[i], stats.sigma_xy[i]);
        l.push((2.0 * mx * my + c1) / (mx * mx + my * my + c1));
        c.push((2.0 * sx * sy + c2) / (sx * sx + sy * sy + c2));
        s.push((sxy + c3) / (sx * sy + c3));
    }
    (l, c, s)
}
