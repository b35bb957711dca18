//! One PASS/FAIL line per acceptance criterion.
//!
//! `GMCLAB_BUDGET` scales replica counts (default 1) and `GMCLAB_CRITERIA`
//! selects a comma-separated subset.

use gmclab::acceptance::{run_criterion, Budget, CRITERIA, DEFAULT_SEED};

fn main() {
    let args: Vec<String> = std::env::args().collect();
    // cargo passes --list when enumerating tests
    if args.iter().any(|a| a == "--list") {
        return;
    }
    let budget = std::env::var("GMCLAB_BUDGET").ok().and_then(|s| s.parse().ok()).unwrap_or(1.0);
    let ids: Vec<u8> = match std::env::var("GMCLAB_CRITERIA") {
        Ok(s) => s.split(',').filter_map(|x| x.trim().parse().ok()).collect(),
        Err(_) => CRITERIA.iter().map(|c| c.0).collect(),
    };
    let mut failed = 0;
    for id in ids {
        let out = run_criterion(id, Budget(budget), DEFAULT_SEED);
        println!("{}", out.line());
        if !out.pass {
            failed += 1;
        }
    }
    println!("acceptance: {failed} criteria failed");
    if failed > 0 {
        std::process::exit(1);
    }
}
