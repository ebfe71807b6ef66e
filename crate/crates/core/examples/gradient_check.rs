//! Runs the built-in oracle and finite-difference checks.

use btseg::check::{run_checks, CheckScope};

fn main() {
    for r in run_checks(CheckScope::All) {
        println!(
            "{:<4} {:<40} {:.2e} (tol {:.0e})",
            if r.passed() { "ok" } else { "FAIL" },
            r.name,
            r.max_rel_err,
            r.tolerance
        );
    }
}
