use bfr_autograd::{Tape, Tensor};

fn main() {
    let x = Tensor::<f32>::full(vec![4, 16, 64, 64], 0.5);
    let w = Tensor::<f32>::full(vec![16, 16, 3, 3], 0.01);
    let t0 = std::time::Instant::now();
    for _ in 0..10 {
        let mut t = Tape::new();
        let xv = t.variable(x.clone());
        let wv = t.variable(w.clone());
        let y = t.conv2d(xv, wv, 1, 1).unwrap();
        let s = t.sqr(y);
        let l = t.mean(s);
        let _ = t.backward(l).unwrap();
    }
    println!("{:?} per fwd+bwd", t0.elapsed() / 10);
}
