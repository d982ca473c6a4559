//! Finite-difference check of every backward pass in 64-bit precision.

use mtcn::gradcheck::run_suite;

fn main() -> anyhow::Result<()> {
    let checks = run_suite(0)?;
    for c in &checks {
        println!(
            "{:<28} {:>6} values  max rel err {:.2e}  {}",
            c.name,
            c.checked,
            c.max_relative_error,
            if c.passed() { "ok" } else { "FAILED" }
        );
    }
    anyhow::ensure!(checks.iter().all(|c| c.passed()), "gradient check failed");
    Ok(())
}
