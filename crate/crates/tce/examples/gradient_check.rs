//! Verifies every module's analytic gradients against central finite
//! differences, including the end-to-end loss on a two-pair batch.
//!
//!     cargo run --example gradient_check

use tce::checks::{full_loss_check, module_gradient_suite, GRAD_TOL};

fn main() -> tce::Result<()> {
    let mut all_ok = true;
    for seed in 0..3 {
        println!("seed {seed}:");
        for check in module_gradient_suite(seed)? {
            let status = if check.passed() { "ok" } else { "FAIL" };
            println!("  {:24} {}  {status}", check.name, check.report);
            all_ok &= check.passed();
        }
    }
    let full = full_loss_check(0)?;
    let status = if full.passes(GRAD_TOL) { "ok" } else { "FAIL" };
    println!("full retrieval loss        {full}  {status}");
    all_ok &= full.passes(GRAD_TOL);
    println!("{}", if all_ok { "all gradients verified" } else { "mismatches found" });
    Ok(())
}
