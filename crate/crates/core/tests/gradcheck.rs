use std::time::Instant;

use mvstta::gradcheck::{passed, results_csv, run_suite, SuiteConfig, TOLERANCE};

#[test]
fn full_suite_passes_within_budget() {
    let start = Instant::now();
    let results = run_suite(&SuiteConfig::default()).unwrap();
    let elapsed = start.elapsed();
    for r in &results {
        println!("{:<40} {:>4} {:e}", r.name, r.instances, r.worst);
    }
    assert!(results.iter().all(|r| r.instances >= 20));
    let failing: Vec<_> = results.iter().filter(|r| r.worst >= TOLERANCE).collect();
    assert!(passed(&results), "failing: {failing:?}");
    assert!(elapsed.as_secs() < 120, "{elapsed:?}");
    assert_eq!(results_csv(&results).lines().count(), results.len() + 1);
}
