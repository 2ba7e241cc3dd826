//! Verify every autodiff primitive and the assembled pixels-to-loss micro
//! model against central finite differences.
//!
//! ```bash
//! cargo run --release --example gradcheck_suite
//! ```

use decap::gradcheck::standard_battery;

fn main() {
    let started = std::time::Instant::now();
    let reports = standard_battery(20);
    let mut failed = 0;
    for r in &reports {
        let status = if r.passed() { "PASS" } else { "FAIL" };
        println!(
            "{status}  {:<42} max rel err {:.3e} (tol {:.0e})",
            r.name, r.max_rel_err, r.rel_tol
        );
        if !r.passed() {
            failed += 1;
        }
    }
    println!(
        "\n{} checks, {} failed, {:.1}s",
        reports.len(),
        failed,
        started.elapsed().as_secs_f64()
    );
    std::process::exit(if failed == 0 { 0 } else { 1 });
}
