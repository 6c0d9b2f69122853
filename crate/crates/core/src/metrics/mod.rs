//! Image-quality measurements and the latent PCA diagnostic.

mod pca;
mod ssim;

pub use pca::{latent_pca_histogram, Histogram2d, LatentPca, HISTOGRAM_BINS};
pub use ssim::{ssim, ssim_components, ssim_node, ssim_per_image, window_stats, SsimParams, WindowStats};

use jscc_autodiff::{Graph, NodeId, Scalar, Tensor};

use crate::error::{Error, Result};

/// PSNR reported for a perfect reconstruction.
pub const PSNR_CAP_DB: f64 = 100.0;

fn check_same_shape<T: Scalar>(x: &Tensor<T>, y: &Tensor<T>) -> Result<()> {
    if x.shape() != y.shape() {
        return Err(Error::Config(format!(
            "image shapes differ: {:?} vs {:?}",
            x.shape(),
            y.shape()
        )));
    }
    Ok(())
}

pub fn mse<T: Scalar>(x: &Tensor<T>, y: &Tensor<T>) -> Result<f64> {
    check_same_shape(x, y)?;
    let n = x.numel() as f64;
    Ok(x.data().iter().zip(y.data()).map(|(a, b)| (a.as_f64() - b.as_f64()).powi(2)).sum::<f64>() / n)
}

pub fn mae<T: Scalar>(x: &Tensor<T>, y: &Tensor<T>) -> Result<f64> {
    check_same_shape(x, y)?;
    let n = x.numel() as f64;
    Ok(x.data().iter().zip(y.data()).map(|(a, b)| (a.as_f64() - b.as_f64()).abs()).sum::<f64>() / n)
}

/// `10 log10(peak² / mse)`, capped at [`PSNR_CAP_DB`].
pub fn psnr_from_mse(mse: f64, peak: f64) -> f64 {
    if mse <= 0.0 {
        return PSNR_CAP_DB;
    }
    (10.0 * (peak * peak / mse).log10()).min(PSNR_CAP_DB)
}

pub fn psnr<T: Scalar>(x: &Tensor<T>, x_hat: &Tensor<T>, peak: f64) -> Result<f64> {
    if !(peak > 0.0) {
        return Err(Error::Config(format!("PSNR peak must be positive, got {peak}")));
    }
    Ok(psnr_from_mse(mse(x, x_hat)?, peak))
}

/// Mean squared error node.
pub fn mse_node<T: Scalar>(g: &mut Graph<T>, x: NodeId, x_hat: NodeId) -> Result<NodeId> {
    let d = g.sub(x_hat, x)?;
    let sq = g.square(d)?;
    Ok(g.mean(sq)?)
}

/// Mean absolute error node over all `n` elements.
pub fn mae_node<T: Scalar>(g: &mut Graph<T>, x: NodeId, x_hat: NodeId) -> Result<NodeId> {
    let d = g.sub(x_hat, x)?;
    let a = g.abs(d)?;
    Ok(g.mean(a)?)
}

/// `(mse, mae)` as graph nodes.
pub fn pixel_losses<T: Scalar>(g: &mut Graph<T>, x: NodeId, x_hat: NodeId) -> Result<(NodeId, NodeId)> {
    Ok((mse_node(g, x, x_hat)?, mae_node(g, x, x_hat)?))
}
