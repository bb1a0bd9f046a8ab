use samlab_core::verify::collapse_checks;

#[test]
fn every_collapse_identity_is_bit_exact() {
    let checks = collapse_checks(5, 20).unwrap();
    assert_eq!(checks.len(), 4 * (7 + 2) + 4 * 4);
    let broken: Vec<_> = checks.iter().filter(|c| !c.identical).collect();
    assert!(broken.is_empty(), "{broken:#?}");
}
