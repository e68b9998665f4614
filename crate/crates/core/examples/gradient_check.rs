//! Finite-difference check of the composite contrastive loss for every
//! fusion mode, plus the step-size sweep for one of them.

use pixfuse::fusionnet::FusionMode;
use pixfuse::pipeline::gradcheck::{composite_grad_check, eps_sweep};

fn main() -> pixfuse::Result<()> {
    for mode in [FusionMode::PixEF, FusionMode::PixIF, FusionMode::PixLF, FusionMode::Mcl] {
        let r = composite_grad_check(mode, 200, 1e-5, 1e-4, 0)?;
        println!("{mode:?}: {} parameters, max relative error {:.2e} at {}", r.checked, r.max_rel_error, r.worst);
    }
    let eps = [1e-3, 1e-4, 1e-5, 1e-6, 1e-7];
    for (e, err) in eps.iter().zip(eps_sweep(FusionMode::PixIF, &eps, 200, 0)?) {
        println!("PixIF eps {e:.0e}: max relative error {err:.2e}");
    }
    Ok(())
}
