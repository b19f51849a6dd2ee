//! The bundled scene files describe the same scenes as the presets.

use std::path::Path;

use gmc::synthgen::{presets, SceneSpec};

fn load(name: &str) -> SceneSpec {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("scenes").join(name);
    serde_json::from_slice(&std::fs::read(&path).unwrap()).unwrap()
}

#[test]
fn bundled_scenes_match_presets() {
    assert_eq!(load("smoke.json"), presets::smoke());
    assert_eq!(load("rigid.json"), presets::rigid(2000));
    assert_eq!(load("criss-cross.json"), presets::criss_cross(1000));
    assert_eq!(load("articulated.json"), presets::articulated_box(1200, 800, presets::ARTICULATED_GAP));
}

#[test]
fn bundled_scenes_generate() {
    for name in ["smoke.json", "rigid.json", "criss-cross.json", "articulated.json"] {
        let scene = gmc::synthgen::generate(&load(name)).unwrap();
        assert_eq!(scene.start.len(), scene.end.len());
        assert_eq!(scene.truth.matches.len(), scene.start.len());
    }
}
