// Temporary development harness; not part of the deliverable.
use dynsplat::field::{DeformationField, FieldConfig};
use nalgebra::Vector3;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let field = DeformationField::<f64>::new(
        FieldConfig::default(),
        Vector3::new(-0.5, -0.5, -0.5),
        Vector3::new(0.5, 0.5, 0.5),
        &mut rng,
    );
    let probes = [
        (Vector3::new(0.0, 0.0, 0.0), 0.0),
        (Vector3::new(0.3, -0.2, 0.1), 0.0),
        (Vector3::new(0.3, -0.2, 0.1), 0.7),
        (Vector3::new(-0.4, 0.4, -0.3), 0.3),
    ];
    for (x, t) in probes {
        let fd = field.hex.encode(&x, t);
        let norm: f64 = fd.iter().map(|v| v * v).sum::<f64>().sqrt();
        eprintln!("x={:?} t={t}: |f_d|={norm:.4} f_d[0..4]={:?}", x.as_slice(), &fd[..4]);
    }
}
