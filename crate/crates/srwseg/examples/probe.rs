use srwseg::synthdata::{generate_scene, modality_separability};

fn main() {
    let n = 1000;
    let mean: f64 = (0..n)
        .map(|seed| {
            let (_, mask) = generate_scene(seed, 64).unwrap();
            mask.iter().filter(|&&v| v == 1).count() as f64 / 4096.0
        })
        .sum::<f64>()
        / n as f64;
    println!("mean lesion area over {n} seeds: {mean:.4}");
    let acc = modality_separability(200, 64, 2024).unwrap();
    println!("modality separability over 200 seeds: {acc:.4}");
}
