mod support;

use std::time::Instant;

use metainflect::adcore::{finite_difference_check, max_relative_error, ParamSet, Tape, Tensor};
use metainflect::corpus::{parse_dataset, LanguageId, Vocabulary};
use metainflect::models::{Model, ModelDims, ModelKind};
use metainflect::seeded_rng;

use support::dd::{Real, DD};
use support::gradcheck::{model_gradient_error, random_instance, randomized_op_errors, reference_loss_gap, Instance, FD_EPSILON};

const TOLERANCE: f64 = 1e-4;

#[test]
fn every_op_kind_passes_randomized_checks() {
    for seed in 0..20 {
        for (name, err) in randomized_op_errors(seed) {
            assert!(err < TOLERANCE, "{name} seed {seed}: {err:e}");
        }
    }
}

#[test]
fn lstm_cell_gradient() {
    let (e, h) = (3, 4);
    let mut rng = seeded_rng(11);
    let params = ParamSet::new()
        .with("x", Tensor::uniform(&[1, e], 1.0, &mut rng))
        .with("h", Tensor::uniform(&[1, h], 1.0, &mut rng))
        .with("c", Tensor::uniform(&[1, h], 1.0, &mut rng))
        .with("wx", Tensor::uniform(&[e, 4 * h], 1.0, &mut rng))
        .with("wh", Tensor::uniform(&[h, 4 * h], 1.0, &mut rng))
        .with("b", Tensor::uniform(&[4 * h], 1.0, &mut rng));
    let loss = |p: &ParamSet| {
        let mut tape = Tape::new();
        let n = tape.params(p);
        let z = tape.matmul(n["x"], n["wx"]);
        let zh = tape.matmul(n["h"], n["wh"]);
        let z = tape.add(z, zh);
        let z = tape.add_row(z, n["b"]);
        let gate = |tape: &mut Tape, k: usize| tape.slice_cols(z, k * h, (k + 1) * h);
        let (i, f, g, o) = (gate(&mut tape, 0), gate(&mut tape, 1), gate(&mut tape, 2), gate(&mut tape, 3));
        let (i, f, g, o) = (tape.sigmoid(i), tape.sigmoid(f), tape.tanh(g), tape.sigmoid(o));
        let fc = tape.mul(f, n["c"]);
        let ig = tape.mul(i, g);
        let c = tape.add(fc, ig);
        let tc = tape.tanh(c);
        let hn = tape.mul(o, tc);
        let both = tape.concat_cols(&[hn, c]);
        let sq = tape.mul(both, both);
        let l = tape.sum(sq);
        Ok((tape.value(l).item(), tape.backward(l)?))
    };
    let err = finite_difference_check(loss, &params, 1e-5).unwrap();
    assert!(err < TOLERANCE, "{err:e}");
}

#[test]
fn reference_loss_agrees_with_model_loss() {
    for kind in [ModelKind::Med, ModelKind::Pg] {
        for seed in 0..10 {
            let gap = reference_loss_gap(&random_instance(kind, seed));
            assert!(gap < 1e-12, "{kind} seed {seed}: {gap:e}");
        }
    }
}

fn check_losses(kind: ModelKind) {
    let start = Instant::now();
    for seed in 0..20 {
        let err = model_gradient_error(&random_instance(kind, seed));
        assert!(err < TOLERANCE, "{kind} seed {seed}: {err:e}");
    }
    println!("{kind}: 20 instances in {:?}", start.elapsed());
}

#[test]
fn med_loss_gradients() {
    check_losses(ModelKind::Med);
}

#[test]
fn pg_loss_gradients() {
    check_losses(ModelKind::Pg);
}

#[test]
fn three_character_med_example() {
    let ds = parse_dataset("abc\tabd\tV;PST\n", &LanguageId::new("xx")).unwrap();
    let vocab = Vocabulary::build(&[&ds]).unwrap();
    let model = Model::new(ModelKind::Med, ModelDims::new(4, 5, 3), vocab).unwrap();
    let params = model.init_params(&mut seeded_rng(3));
    let batch = model.encode_all(&ds.examples);
    let err = model_gradient_error(&Instance { model, params, batch });
    assert!(err < TOLERANCE, "{err:e}");
}

#[test]
fn double_double_difference_is_exact_on_a_quadratic() {
    // d/dx of x^2 at x = 0.3 is 0.6; the f64 central difference at the same
    // step would be off by roughly 1e-8.
    let params = ParamSet::new().with("x", Tensor::vector(vec![0.3]));
    let grads = metainflect::adcore::GradientMap::from_map([("x".to_string(), Tensor::vector(vec![0.6]))].into());
    let eps = DD::new(FD_EPSILON);
    let err = max_relative_error(&grads, &params, |_, _| {
        let x = DD::new(0.3);
        let f = |v: DD| v * v;
        Ok(((f(x + eps) - f(x - eps)) / (eps + eps)).to_f64())
    })
    .unwrap();
    assert!(err < 1e-14, "{err:e}");
}
