//! Filter-bank self-check: design a bank from the given parameters and
//! measure the white-noise analysis→synthesis roundtrip SNR.

use clap::Args;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use tadevoc_core::pqmf::{
    design_prototype_bank, pqmf_analysis, pqmf_synthesis, snr_db, DEFAULT_CUTOFF,
    DEFAULT_KAISER_BETA, DEFAULT_TAPS,
};
use tadevoc_core::Result;

use crate::mix_seed;

/// Identity banks reconstruct exactly; report this instead of ∞.
pub const SNR_CAP_DB: f64 = 300.0;

/// Reconstruction quality below this is a failed check for any real
/// (multi-band) bank.
pub const SNR_FLOOR_DB: f64 = 30.0;

const SALT_PQMF_NOISE: u64 = 0x20;
const NOISE_LEN: usize = 8192;

#[derive(Debug, Clone, Args)]
pub struct PqmfCheckArgs {
    /// Number of sub-bands (1, 2, 4, or 8).
    #[arg(long, default_value_t = 4)]
    pub bands: usize,
    /// Prototype filter order (even).
    #[arg(long, default_value_t = DEFAULT_TAPS)]
    pub taps: usize,
    /// Reference cutoff ratio of the four-band prototype, in (0, 0.5).
    #[arg(long, default_value_t = DEFAULT_CUTOFF)]
    pub cutoff: f64,
    /// Kaiser window shape parameter.
    #[arg(long, default_value_t = DEFAULT_KAISER_BETA)]
    pub beta: f64,
    /// Seed of the white-noise probe.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PqmfCheckReport {
    pub bands: usize,
    pub snr_db: f64,
    pub pass: bool,
}

impl PqmfCheckReport {
    pub fn lines(&self) -> String {
        format!("bands={} snr_db={:.1} pass={}", self.bands, self.snr_db, self.pass)
    }
}

pub fn run(args: &PqmfCheckArgs) -> Result<PqmfCheckReport> {
    let bank = design_prototype_bank::<f64>(args.bands, args.taps, args.cutoff, args.beta)?;

    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(args.seed, SALT_PQMF_NOISE));
    let len = NOISE_LEN.div_ceil(args.bands) * args.bands;
    let x: Vec<f64> = (0..len).map(|_| StandardNormal.sample(&mut rng)).collect();

    let sub = pqmf_analysis(&x, &bank)?;
    let recon = pqmf_synthesis(&sub, &bank)?;
    let snr = snr_db(&x, &recon, bank.taps()).min(SNR_CAP_DB);
    let pass = args.bands == 1 || snr > SNR_FLOOR_DB;
    Ok(PqmfCheckReport { bands: args.bands, snr_db: snr, pass })
}
