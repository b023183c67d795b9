pub mod cli;
pub mod config;
pub mod denoiser;
pub mod evaluation;
pub mod guidance;
pub mod latent;
pub mod pipeline;
pub mod specifier;
