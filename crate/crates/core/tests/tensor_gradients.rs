mod common;

use common::grad_cases::{attention_case, op_cases, run, ATTENTION_TOL, OP_TOL, SEEDS};

#[test]
fn every_op_matches_central_differences() {
    let mut failures = Vec::new();
    for c in op_cases() {
        for seed in SEEDS {
            let r = run(&c, seed);
            assert!(r.checked > 0, "{}", c.name);
            if r.max_rel_error >= OP_TOL {
                failures.push(format!("{} seed {seed}: {:.2e}", c.name, r.max_rel_error));
            }
        }
    }
    assert!(failures.is_empty(), "{failures:#?}");
}

#[test]
fn attention_matches_central_differences() {
    let c = attention_case();
    for seed in SEEDS {
        let r = run(&c, seed);
        assert!(r.max_rel_error < ATTENTION_TOL, "seed {seed}: {:.2e}", r.max_rel_error);
    }
}
