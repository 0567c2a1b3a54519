//! Analytic gradients of the model losses against central finite
//! differences, in double precision on small configurations.

mod common;

use common::{cvae_probes, denoiser_probes, TOLERANCE};

fn assert_close(probes: &[common::Probe]) {
    for p in probes {
        assert!(
            p.relative < TOLERANCE,
            "{}[{}]: analytic {:e} numeric {:e} rel {:e}",
            p.param,
            p.index,
            p.analytic,
            p.numeric,
            p.relative
        );
    }
}

#[test]
fn denoiser_loss_gradients() {
    assert_close(&denoiser_probes());
}

#[test]
fn cvae_reparameterized_loss_gradients() {
    assert_close(&cvae_probes());
}
