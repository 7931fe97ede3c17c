//! Exponential-family arithmetic for the two approximating families used by
//! the EP samplers: diagonal Gaussians over a latent track and
//! normal-inverse-Wishart over a Gaussian mean/covariance pair.
//!
//! Everything here is a pure function over immutable values; cavity removal
//! and site inclusion are exact natural-parameter subtraction/addition.

mod diag_gauss;
mod niw;
mod quadrature;

pub use diag_gauss::{site_from_tilted, DiagGaussianTrack};
pub use niw::{
    niw_from_moments, niw_posterior_update, niw_rank_one_variants, niw_suffstat_moments,
    ln_mv_gamma, mv_digamma, NiwMoments, NiwNatural, NiwParams, RankOnePosterior,
};
pub use quadrature::{gamma_quadrature, QuadGrid};
