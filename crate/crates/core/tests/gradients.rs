use memvoice::ctc::ctc_loss_node;
use memvoice::decoder::{Decoder, DecoderConfig};
use memvoice::memory::{ReadHead, ReadHeadConfig, Similarity, SpeakerMemory};
use memvoice::nn::{bidirectional, check_gradient, GatedCell, Graph, ParamId, ParamStore, Tensor, Var, DEFAULT_EPS};
use memvoice::vocab::EOS;
use memvoice::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const TOL: f64 = 1e-4;

fn random(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    Tensor::from_vec(rows, cols, (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

/// Checks `sum(probe * build(inputs))` where every input is a parameter.
fn check_op(shapes: &[(usize, usize)], build: impl Fn(&mut Graph, &[Var]) -> Result<Var>) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(shapes.len() as u64 * 31 + 7);
    let mut store = ParamStore::new();
    let ids: Vec<ParamId> = shapes
        .iter()
        .enumerate()
        .map(|(i, &(r, c))| store.add(format!("in{i}"), random(&mut rng, r, c)))
        .collect();
    let mut probe: Option<Tensor> = None;
    let report = check_gradient(&mut store, DEFAULT_EPS, |store| {
        let mut g = Graph::new();
        let vars: Vec<Var> = ids.iter().map(|id| g.param(store, *id)).collect();
        let out = build(&mut g, &vars)?;
        let shape = g.value(out).shape().to_vec();
        let p = probe
            .get_or_insert_with(|| {
                let mut r = ChaCha8Rng::seed_from_u64(99);
                random(&mut r, shape[0], shape[1])
            })
            .clone();
        let pv = g.constant(p);
        let weighted = g.mul(out, pv)?;
        let loss = g.sum(weighted)?;
        let grads = g.backward(loss)?;
        g.accumulate(&grads, store);
        Ok(g.value(loss).item())
    })
    .unwrap();
    report.max_relative_error()
}

#[test]
fn every_graph_op_passes_the_gradient_check() {
    let cases: Vec<(&str, Vec<(usize, usize)>, Box<dyn Fn(&mut Graph, &[Var]) -> Result<Var>>)> = vec![
        ("matmul", vec![(2, 3), (3, 4)], Box::new(|g, v| g.matmul(v[0], v[1]))),
        ("affine", vec![(2, 3), (3, 4), (1, 4)], Box::new(|g, v| g.affine(v[0], v[1], v[2]))),
        ("add", vec![(2, 3), (2, 3)], Box::new(|g, v| g.add(v[0], v[1]))),
        ("sub", vec![(2, 3), (2, 3)], Box::new(|g, v| g.sub(v[0], v[1]))),
        ("mul", vec![(2, 3), (2, 3)], Box::new(|g, v| g.mul(v[0], v[1]))),
        ("add_row", vec![(3, 2), (1, 2)], Box::new(|g, v| g.add_row(v[0], v[1]))),
        ("scale", vec![(2, 2)], Box::new(|g, v| g.scale(v[0], -1.7))),
        ("sigmoid", vec![(2, 3)], Box::new(|g, v| g.sigmoid(v[0]))),
        ("tanh", vec![(2, 3)], Box::new(|g, v| g.tanh(v[0]))),
        ("concat_cols", vec![(2, 1), (2, 3)], Box::new(|g, v| g.concat_cols(v[0], v[1]))),
        ("col_slice", vec![(2, 4)], Box::new(|g, v| g.col_slice(v[0], 1, 2))),
        ("row", vec![(3, 2)], Box::new(|g, v| g.row(v[0], 1))),
        ("stack_rows", vec![(1, 3), (1, 3)], Box::new(|g, v| g.stack_rows(&[v[0], v[1], v[0]]))),
        ("transpose", vec![(2, 3)], Box::new(|g, v| g.transpose(v[0]))),
        ("softmax_rows", vec![(2, 4)], Box::new(|g, v| g.softmax_rows(v[0]))),
        (
            "cross_entropy_rows",
            vec![(3, 4)],
            Box::new(|g, v| g.cross_entropy_rows(v[0], &[0, 3, 1])),
        ),
        (
            "cosine_rows",
            vec![(2, 3)],
            Box::new(|g, v| {
                let m = Tensor::from_vec(3, 2, vec![0.3, -1.0, 0.8, 0.2, -0.5, 0.9]).unwrap();
                g.cosine_rows(v[0], &m)
            }),
        ),
        ("location_conv", vec![(1, 5), (2, 3)], Box::new(|g, v| g.location_conv(v[0], v[1]))),
        ("sum", vec![(2, 3)], Box::new(|g, v| g.sum(v[0]))),
    ];
    for (name, shapes, build) in cases {
        let err = check_op(&shapes, build);
        assert!(err <= TOL, "{name}: max relative error {err:e}");
    }
}

#[test]
fn bidirectional_layer_passes_the_gradient_check() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut store = ParamStore::new();
    let fwd = GatedCell::new(&mut store, "f", 2, 3, &mut rng);
    let bwd = GatedCell::new(&mut store, "b", 2, 3, &mut rng);
    let x = store.add("x", random(&mut rng, 4, 2));
    let probe = random(&mut rng, 4, 6);
    let report = check_gradient(&mut store, DEFAULT_EPS, |store| {
        let mut g = Graph::new();
        let (f, b) = (fwd.bind(&mut g, store), bwd.bind(&mut g, store));
        let xv = g.param(store, x);
        let out = bidirectional(&mut g, xv, &f, &b)?;
        let p = g.constant(probe.clone());
        let m = g.mul(out, p)?;
        let loss = g.sum(m)?;
        let grads = g.backward(loss)?;
        g.accumulate(&grads, store);
        Ok(g.value(loss).item())
    })
    .unwrap();
    assert_eq!(report.params.len(), 7);
    assert!(report.max_relative_error() <= TOL, "{report:?}");
}

#[test]
fn ctc_loss_passes_the_gradient_check() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut store = ParamStore::new();
    let logits = store.add("logits", random(&mut rng, 5, 4));
    let report = check_gradient(&mut store, DEFAULT_EPS, |store| {
        let mut g = Graph::new();
        let lv = g.param(store, logits);
        let loss = ctc_loss_node(&mut g, lv, &[1, 3, 3])?;
        let grads = g.backward(loss)?;
        g.accumulate(&grads, store);
        Ok(g.value(loss).item())
    })
    .unwrap();
    assert!(report.max_relative_error() <= TOL, "{report:?}");
}

#[test]
fn read_head_passes_the_gradient_check_for_query_input() {
    for similarity in [Similarity::Cosine, Similarity::ScaledDot] {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut store = ParamStore::new();
        let config = ReadHeadConfig { similarity, gamma: 2.0 };
        let head = ReadHead::new(&mut store, "read", 3, 4, config, &mut rng).unwrap();
        let h = store.add("h", random(&mut rng, 3, 3));
        let cols: Vec<Vec<f64>> = (0..3).map(|_| (0..4).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
        let memory = SpeakerMemory::new(vec!["a".into(), "b".into(), "c".into()], &cols).unwrap();
        let probe = random(&mut rng, 3, 4);
        let report = check_gradient(&mut store, DEFAULT_EPS, |store| {
            let mut g = Graph::new();
            let hv = g.param(store, h);
            let out = head.read_rows(&mut g, store, hv, &memory)?;
            let p = g.constant(probe.clone());
            let m = g.mul(out.read, p)?;
            let loss = g.sum(m)?;
            let grads = g.backward(loss)?;
            g.accumulate(&grads, store);
            Ok(g.value(loss).item())
        })
        .unwrap();
        assert!(report.max_relative_error() <= TOL, "{similarity:?}: {report:?}");
    }
}

#[test]
fn attention_loss_passes_the_gradient_check() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut store = ParamStore::new();
    let config = DecoderConfig {
        hidden_size: 3,
        embed_size: 2,
        attention_dim: 3,
        location_channels: 2,
        location_width: 3,
    };
    let decoder = Decoder::new(&mut store, config, 4, EOS, 2, &mut rng).unwrap();
    let enc = store.add("enc", random(&mut rng, 3, 2));
    let report = check_gradient(&mut store, DEFAULT_EPS, |store| {
        let mut g = Graph::new();
        let ev = g.param(store, enc);
        let bound = decoder.bind(&mut g, store, ev)?;
        let loss = bound.attention_loss(&mut g, &[2, 3, EOS])?;
        let grads = g.backward(loss)?;
        g.accumulate(&grads, store);
        Ok(g.value(loss).item())
    })
    .unwrap();
    assert!(report.max_relative_error() <= TOL, "{report:?}");
}
