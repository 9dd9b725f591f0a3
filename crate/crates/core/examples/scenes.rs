//! Draws a few generated scenes with their source and target annotations and
//! reports the erosion ceiling over a larger sample.
//!
//! `cargo run --release --example scenes -- [seed]`

use bgrto::env::{generate_scene, Domain, EnvConfig, GridScene, Mask, WORD_LARGE, WORD_OBJECT, WORD_ONE, WORD_SMALL, WORD_THE};

const COLOR_NAMES: [&str; 4] = ["red", "green", "blue", "yellow"];

fn words(scene: &GridScene) -> String {
    scene
        .instruction
        .iter()
        .map(|&w| match w {
            WORD_THE => "the".to_string(),
            WORD_SMALL => "small".into(),
            WORD_LARGE => "large".into(),
            WORD_OBJECT => "object".into(),
            WORD_ONE => "one".into(),
            c => COLOR_NAMES.get(c - 5).map_or(format!("color{}", c - 5), |s| s.to_string()),
        })
        .collect::<Vec<_>>()
        .join(" ")
}

fn draw(scene: &GridScene, mask: &Mask) {
    for y in 0..scene.height {
        let cells: String = (0..scene.width)
            .map(|x| match (scene.color_at(x, y), mask.get(x, y)) {
                (_, true) => '#',
                (Some(c), false) => char::from_digit(c as u32, 10).unwrap_or('?'),
                (None, false) => '.',
            })
            .collect();
        println!("  {cells}");
    }
}

fn main() -> bgrto::Result<()> {
    let seed: u64 = std::env::args().nth(1).and_then(|a| a.parse().ok()).unwrap_or(1);
    let env = EnvConfig::default();
    for (i, domain) in [Domain::Source, Domain::Target].into_iter().enumerate() {
        let scene = generate_scene(seed + i as u64, domain, &env)?;
        println!("{domain:?} scene {}: \"{}\" ({:?})", scene.seed, words(&scene), scene.template);
        println!("  digits = object colours, # = official ground truth");
        draw(&scene, scene.official_gt());
        println!("  erosion ceiling of the referred object: {:.4}\n", scene.erosion_ceiling());
    }

    let n = 500;
    let ceiling: f64 = (0..n)
        .map(|i| generate_scene(seed * 1_000_003 + i, Domain::Target, &env).map(|s| s.erosion_ceiling()))
        .sum::<bgrto::Result<f64>>()?
        / n as f64;
    println!("mean erosion ceiling over {n} target scenes: {ceiling:.4}");
    Ok(())
}
