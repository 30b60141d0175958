mod common;

use common::freeze::run_all;
use scalpel_seg::surgery::AblationSpec;

#[test]
fn frozen_parameters_stay_bit_identical() {
    let results = run_all();
    assert_eq!(results.len(), AblationSpec::ALL.len());
    for r in &results {
        assert!(r.sound(), "{}: frozen moved {}, changed {} of ledger {}", r.spec.name(), r.frozen_changed, r.changed, r.ledger);
    }
}
