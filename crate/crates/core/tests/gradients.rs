use lsat_core::gradsuite::{cases, format_table, injected_fault_case, run_cases, Scope};

fn sweep(scope: Scope) {
    let results = run_cases(&cases(scope), 0);
    let table = format_table(&results);
    println!("{table}");
    let failed: Vec<&str> = results.iter().filter(|r| !r.passed()).map(|r| r.name).collect();
    assert!(failed.is_empty(), "failing cases {failed:?}\n{table}");
}

#[test]
fn every_primitive_matches_central_differences() {
    sweep(Scope::Op);
}

#[test]
fn every_module_matches_central_differences() {
    sweep(Scope::Module);
}

#[test]
fn full_model_matches_central_differences() {
    sweep(Scope::Model);
}

#[test]
fn other_seeds_pass_too() {
    for seed in [1, 7] {
        let results = run_cases(&cases(Scope::Module), seed);
        assert!(
            results.iter().all(|r| r.passed()),
            "seed {seed}\n{}",
            format_table(&results)
        );
    }
}

#[test]
fn a_wrong_adjoint_is_caught() {
    let r = injected_fault_case().run(3);
    assert!(!r.passed());
    let rep = r.report.as_ref().unwrap();
    assert!(
        (rep.max_rel_err - 1.0 / 3.0).abs() < 1e-6,
        "2 vs 3 differ by 1/3 relative: {}",
        rep.max_rel_err
    );
}
