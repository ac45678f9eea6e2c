use cvqn_wasm_demo::{bound_report, grouping_report, quantizer_samples};

#[test]
fn bound_text() {
    let r = bound_report("0.25,0.5,0.25", "3,5,7", 5, 8, 2, 2).unwrap();
    assert!(r.ends_with("2.2590 < 2.3219: satisfied"), "{r}");
    assert!(r.contains("72.3 bits total"), "{r}");
    assert!(bound_report("1", "5", 5, 8, 2, 2).unwrap().ends_with("equal: not satisfied"));
    assert!(bound_report("0.5,0.5", "3", 5, 8, 2, 2).is_err());
    assert!(bound_report("a", "3", 5, 8, 2, 2).is_err());
    assert!(bound_report("1", "3", 0, 8, 2, 2).is_err());
}

#[test]
fn quantizer_curve_shape() {
    let s = quantizer_samples("1,1,1", "-1,0,1", "0.7071067811865476,0.7071067811865476,0.7071067811865476", -2.0, 2.0, 5).unwrap();
    assert_eq!(s.len(), 15);
    assert_eq!(&s[..3], &[-2.0, -1.0, s[2]]);
    assert_eq!(s[7], 0.0);
    assert!(s[8].abs() < 1e-12);
    assert!(s.chunks(3).all(|t| (-1.0..=1.0).contains(&t[2])));
    assert!(quantizer_samples("1", "0", "1", 1.0, 1.0, 5).is_err());
    assert!(quantizer_samples("1,1", "0", "1", 0.0, 1.0, 5).is_err());
}

#[test]
fn grouping_three_groups() {
    let r = grouping_report("0.9,0.1,0.5,0.3,0.8,0.2,0.7,0.4", "0.25,0.5,0.25", "3,5,7").unwrap();
    let lines: Vec<&str> = r.lines().collect();
    assert_eq!(lines[0], "sorted order: [1, 5, 3, 7, 2, 6, 4, 0]");
    assert_eq!(lines[1], "group 0: q=3 channels [1, 5]");
    assert_eq!(lines[2], "group 1: q=5 channels [3, 7, 2, 6]");
    assert_eq!(lines[3], "group 2: q=7 channels [4, 0]");
}
