//! Times a single 224x224 forward pass of a freshly initialized 23-class model.
//! Run with `cargo run --release -p plate-core --example latency`.

use plate_core::model::{placeholder_labels, Model, ModelSpec};
use plate_core::tensor::Tensor;
use std::time::Instant;

fn main() {
    let m = Model::build(ModelSpec::mobilenet_v2(23), placeholder_labels(23), 0).unwrap();
    let x = Tensor::<f32>::full([1, 3, 224, 224], 0.3);
    let mut times = Vec::new();
    for _ in 0..10 {
        let t = Instant::now();
        let p = m.forward(&x, 5).unwrap();
        times.push(t.elapsed().as_secs_f64() * 1e3);
        std::hint::black_box(p);
    }
    times.sort_by(f64::total_cmp);
    println!("median {:.1} ms, min {:.1}", times[5], times[0]);
}
