use std::time::Instant;
use spdec_core::fem::{Field, FemOperators};
use spdec_core::model::HeatBenchmark;
use spdec_core::noise::{block_rng, fill_normal, StreamId};

fn main() {
    let ops = FemOperators::assemble(10.0, 400, 0.01).unwrap();
    let spec = HeatBenchmark::default().build(&ops);
    let x0 = spec.initial.mean.clone();
    let u = Field::zeros(ops.n_dof());
    let sd = ops.dt().sqrt();
    let mut dw = vec![0.0; 50];
    let mut db = vec![0.0; 5];
    let n = 20_000;

    // forward steps
    let t0 = Instant::now();
    let mut x = x0.clone();
    for k in 0..n {
        let mut rng = block_rng(1, StreamId::custom(0), k as u64);
        fill_normal(&mut rng, &mut dw, sd);
        fill_normal(&mut rng, &mut db, sd);
        x = spdec_core::forward::step_truth(&x, &u, &dw, &db, &spec, &ops, 0).unwrap();
    }
    println!("forward step: {:.2} us", t0.elapsed().as_secs_f64() / n as f64 * 1e6);

    // rng only
    let t0 = Instant::now();
    for k in 0..n {
        let mut rng = block_rng(1, StreamId::custom(0), k as u64);
        fill_normal(&mut rng, &mut dw, sd);
        fill_normal(&mut rng, &mut db, sd);
    }
    println!("rng block:    {:.2} us", t0.elapsed().as_secs_f64() / n as f64 * 1e6);

    // noise accumulation only
    let t0 = Instant::now();
    let mut acc = 0.0;
    for _ in 0..n {
        let f = spdec_core::noise::apply_cylindrical(&spec, &x, &dw, &ops).unwrap();
        acc += f.values()[0];
    }
    println!("cylindrical:  {:.2} us (acc {acc:.3e})", t0.elapsed().as_secs_f64() / n as f64 * 1e6);

    // backward sweep on a 50-step path
    let n_steps = 50;
    let controls: Vec<Field> = (0..n_steps).map(|_| u.clone()).collect();
    let mut dw_rows = Vec::new();
    let mut db_rows = Vec::new();
    for k in 0..n_steps {
        let mut rng = block_rng(2, StreamId::custom(1), k as u64);
        let mut a = vec![0.0; 50];
        let mut b = vec![0.0; 5];
        fill_normal(&mut rng, &mut a, sd);
        fill_normal(&mut rng, &mut b, sd);
        dw_rows.push(a); db_rows.push(b);
    }
    let truth = spdec_core::forward::simulate_truth(x0.clone(), &controls, &dw_rows, &db_rows, &spec, &ops, 0).unwrap();
    let t0 = Instant::now();
    let reps = 400;
    for _ in 0..reps {
        let s = spdec_core::adjoint::backward_sweep(&truth.states, &controls, &dw_rows, &db_rows, &spec, &ops, Default::default()).unwrap();
        std::hint::black_box(&s);
    }
    println!("bwd sweep/step: {:.2} us", t0.elapsed().as_secs_f64() / (reps * n_steps) as f64 * 1e6);
}
