//! Finite-difference cases for the losses and channel normalization, in
//! addition to the autodiff primitives.

use jscc_autodiff::gradcheck::{primitive_cases, Domain, GradCase};
use jscc_autodiff::{AutodiffError, NodeId};

use crate::channel::{normalize_power, ChannelConfig};
use crate::losses::{kl_divergence, mixed_loss, vae_loss, LossConfig};
use crate::metrics::{mae_node, mse_node, ssim_node, SsimParams};

fn lift(r: crate::Result<NodeId>) -> jscc_autodiff::Result<NodeId> {
    r.map_err(|e| match e {
        crate::Error::Autodiff(e) => e,
        other => AutodiffError::InvalidArgument {
            node: "loss".into(),
            detail: other.to_string(),
        },
    })
}

/// Loss and channel cases. Inputs that feed an absolute value are offset so
/// the check stays away from the kink at zero.
pub fn loss_cases() -> Vec<GradCase> {
    use Domain::*;
    let img = vec![1, 3, 16, 16];
    vec![
        GradCase::new("mse", vec![vec![2, 3, 4, 4], vec![2, 3, 4, 4]], vec![Unit, Unit], |g, x| {
            lift(mse_node(g, x[0], x[1]))
        }),
        GradCase::new("mae", vec![vec![2, 3, 4, 4], vec![2, 3, 4, 4]], vec![Unit, Unit], |g, x| {
            let shifted = g.add_scalar(x[1], 1.0)?;
            lift(mae_node(g, x[0], shifted))
        }),
        GradCase::new("kl_divergence", vec![vec![3, 6], vec![3, 6]], vec![Symmetric, Symmetric], |g, x| {
            lift(kl_divergence(g, x[0], x[1]))
        }),
        GradCase::new("ssim_loss", vec![img.clone(), img.clone()], vec![Unit, Unit], |g, x| {
            let s = lift(ssim_node(g, x[0], x[1], &SsimParams::default()))?;
            let neg = g.scale(s, -1.0)?;
            g.add_scalar(neg, 1.0)
        }),
        GradCase::new("mixed_loss", vec![img.clone(), img], vec![Unit, Unit], |g, x| {
            let shifted = g.add_scalar(x[1], 1.0)?;
            lift(mixed_loss(g, x[0], shifted, 0.5, &SsimParams::default()))
        }),
        GradCase::new(
            "vae_loss",
            vec![vec![2, 3, 12, 12], vec![2, 3, 12, 12], vec![2, 8], vec![2, 8]],
            vec![Unit, Unit, Symmetric, Symmetric],
            |g, x| {
                let cfg = LossConfig {
                    beta_kl: 0.5,
                    ..LossConfig::default()
                };
                lift(vae_loss(g, x[0], x[1], Some((x[2], x[3])), &cfg))
            },
        ),
        GradCase::new("normalize_power", vec![vec![3, 8]], vec![AwayFromZero], |g, x| {
            let cfg = ChannelConfig::new(2.0, 10.0, 4).expect("valid channel");
            lift(normalize_power(g, x[0], &cfg))
        }),
    ]
}

/// Every registered case: autodiff primitives followed by the losses.
pub fn all_cases() -> Vec<GradCase> {
    let mut cases = primitive_cases();
    cases.extend(loss_cases());
    cases
}
