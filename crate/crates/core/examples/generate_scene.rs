//! Builds a two-part scene by hand and writes both timesteps as PLY.
//!
//! `cargo run --example generate_scene -- [out_dir]`

use std::path::PathBuf;

use gmc::geometry::{Quaternion, Se3, Vec3};
use gmc::pointset::{save_ply, PlyFormat};
use gmc::synthgen::{generate, PartSpec, SceneSpec, Shape};

fn main() -> anyhow::Result<()> {
    let out: PathBuf = std::env::args().nth(1).unwrap_or_else(|| "scene_out".into()).into();
    std::fs::create_dir_all(&out)?;
    let turn = Quaternion::from_axis_angle(&Vec3::z(), 0.5)?;
    let spec = SceneSpec {
        parts: vec![
            PartSpec {
                name: "can".into(),
                shape: Shape::Cylinder { radius: 0.2, height: 0.6 },
                count: 400,
                color: [0.8, 0.1, 0.1],
                feature: [1.0, 0.0, 0.0, 0.0],
                start: Se3::IDENTITY,
                end: Se3 {
                    rotation: turn,
                    translation: Vec3::new(0.5, 0.0, 0.0),
                },
            },
            PartSpec {
                name: "ball".into(),
                shape: Shape::Sphere { radius: 0.15 },
                count: 200,
                color: [0.1, 0.6, 0.2],
                feature: [0.0, 1.0, 0.0, 0.0],
                start: Se3 {
                    rotation: Quaternion::IDENTITY,
                    translation: Vec3::new(0.0, 0.6, 0.0),
                },
                end: Se3 {
                    rotation: Quaternion::IDENTITY,
                    translation: Vec3::new(0.0, 0.6, 0.4),
                },
            },
        ],
        noise: 0.002,
        feature_jitter: 0.01,
        seed: 1,
    };
    let scene = generate(&spec)?;
    save_ply(&scene.start, out.join("start.ply"), PlyFormat::BinaryLittleEndian)?;
    save_ply(&scene.end, out.join("end.ply"), PlyFormat::Ascii)?;
    println!("{} points per timestep, bbox diagonal {:.3}", scene.start.len(), scene.start.bbox_diagonal());
    for part in &scene.truth.parts {
        println!(
            "{}: rotates {:.1} deg, moves {:.3}",
            part.name,
            part.motion.rotation.angle().to_degrees(),
            part.motion.translation.norm()
        );
    }
    println!("wrote {}", out.display());
    Ok(())
}
