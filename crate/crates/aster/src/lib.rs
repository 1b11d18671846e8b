//! Unsupervised time-series anomaly detection via latent pseudo-anomaly
//! generation.
//!
//! The pipeline embeds sliding windows of a multivariate series into token
//! space ([`embedding`]), models normal windows with a VAE whose twin decoder
//! generates adversarial pseudo-anomalies ([`perturbator`]), and scores
//! windows with a CLS-token transformer classifier ([`classifier`]). Training
//! ([`training`]) routes gradients between these parts with stop- and
//! reverse-gradient gates; evaluation ([`scoring`]) covers thresholded F1 and
//! rank metrics including buffer-averaged VUS variants.

pub mod error;
pub mod gradcheck;
pub mod nn;
pub mod tape;

pub use error::{AsterError, Result};
