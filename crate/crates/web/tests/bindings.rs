use svbrdf_forge_web::{exemplars_json, material_rgba, sphere_rgba, MAX_SIDE};

#[test]
fn material_patch_is_rgba() {
    let px = material_rgba(16, 0.6, 0.4, 0.2, 0.04, 0.5, 1.0, 1.0, 3.0, 0.0, 0.0, 4.0, 10.0).unwrap();
    assert_eq!(px.len(), 16 * 16 * 4);
    assert!(px.chunks_exact(4).all(|p| p[3] == 255));
    assert!(px.chunks_exact(4).any(|p| p[0] > 0));
}

#[test]
fn sphere_background_is_black_and_center_lit() {
    let n = 33;
    let px = sphere_rgba(n, 0.5, 0.5, 0.5, 0.04, 0.4, 0.0, 0.0, 5.0, 1.0).unwrap();
    assert_eq!(&px[..3], &[0, 0, 0]);
    let c = (16 * n + 16) * 4;
    assert!(px[c] > 0);
}

#[test]
fn invalid_input_is_reported() {
    assert!(material_rgba(0, 0.5, 0.5, 0.5, 0.04, 0.5, 0.0, 0.0, 3.0, 0.0, 0.0, 4.0, 1.0).is_err());
    assert!(material_rgba(MAX_SIDE + 1, 0.5, 0.5, 0.5, 0.04, 0.5, 0.0, 0.0, 3.0, 0.0, 0.0, 4.0, 1.0).is_err());
    assert!(material_rgba(8, 0.5, 0.5, 0.5, 0.04, 0.5, 0.0, 0.0, -3.0, 0.0, 0.0, 4.0, 1.0).is_err());
    assert!(sphere_rgba(8, 0.5, 0.5, 0.5, 0.04, 1.5, 0.0, 0.0, 5.0, 1.0).is_err());
    assert!(exemplars_json(1, 3, "sideways").is_err());
}

#[test]
fn exemplars_are_seeded_json() {
    let a = exemplars_json(3, 4, "reflect").unwrap();
    assert_eq!(a, exemplars_json(3, 4, "reflect").unwrap());
    let v: serde_json::Value = serde_json::from_str(&a).unwrap();
    let arr = v.as_array().unwrap();
    assert_eq!(arr.len(), 4);
    assert!(arr[0]["light"]["z"].as_f64().unwrap() > 0.0);
    assert_eq!(arr[0]["highlight"].as_array().unwrap().len(), 2);
}
