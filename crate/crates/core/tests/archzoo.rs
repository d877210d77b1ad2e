use micropatch::archzoo::{ArchKind, Model, ModelSpec};
use micropatch::tensor::{Tape, Tensor};

fn batch(b: usize, seed: u64) -> Tensor<f32> {
    let n = b * 3 * 40 * 40;
    let data = (0..n)
        .map(|i| (((i as u64).wrapping_mul(2654435761).wrapping_add(seed) % 1000) as f32 / 1000.0) - 0.5)
        .collect();
    Tensor::new(&[b, 3, 40, 40], data).unwrap()
}

#[test]
fn every_arch_produces_finite_logits_of_the_right_shape() {
    for arch in ArchKind::ALL {
        let m = Model::<f32>::build(ModelSpec::new(arch, 5, 1)).unwrap();
        let logits = m.predict(&batch(2, 3)).unwrap();
        assert_eq!(logits.shape(), &[2, 5], "{arch}");
        assert!(logits.is_finite(), "{arch}");
        let again = m.predict(&batch(2, 3)).unwrap();
        assert_eq!(logits, again, "{arch} inference is not deterministic");
        let f = m.features(&batch(1, 0)).unwrap();
        assert_eq!(f.shape(), &[1, m.feature_dim()], "{arch}");
    }
}

#[test]
fn wrong_input_shape_is_a_dimension_error() {
    let m = Model::<f32>::build(ModelSpec::new(ArchKind::Cnn, 4, 0)).unwrap();
    let bad = Tensor::<f32>::zeros(&[1, 3, 32, 32]);
    assert!(matches!(
        m.predict(&bad),
        Err(micropatch::tensor::TensorError::Dimension { .. })
    ));
}

#[test]
fn param_count_does_not_depend_on_seed() {
    for arch in [ArchKind::Cnn, ArchKind::CustomViT, ArchKind::SEResNetD4] {
        let a = Model::<f32>::build(ModelSpec::new(arch, 16, 1)).unwrap().param_count();
        let b = Model::<f32>::build(ModelSpec::new(arch, 16, 99)).unwrap().param_count();
        assert_eq!(a, b);
    }
}

#[test]
fn exact_parameter_counts() {
    let expect = [
        (ArchKind::Mlp, 8_892_516),
        (ArchKind::Cnn, 2_024_848),
        (ArchKind::ResNetD4, 2_208_832),
        (ArchKind::SEResNetD4, 2_266_944),
        (ArchKind::Nin, 11_101_332),
        (ArchKind::EfficientNetB0, 3_926_668),
        (ArchKind::ConvNeXtTiny, 4_786_432),
        (ArchKind::CustomViT, 1_893_776),
    ];
    for (arch, n) in expect {
        let m = Model::<f32>::build(ModelSpec::new(arch, 16, 0)).unwrap();
        assert_eq!(m.param_count(), n, "{arch}");
    }
}

#[test]
fn vit_attention_maps_and_token_count() {
    let m = Model::<f64>::build(ModelSpec::new(ArchKind::CustomViT, 16, 2)).unwrap();
    let mut tape = Tape::inference();
    let x = tape.constant(Tensor::zeros(&[2, 3, 40, 40]));
    let f = m.forward(&mut tape, x).unwrap();
    assert_eq!(f.trace.attention.len(), 6);
    for &a in &f.trace.attention {
        assert_eq!(tape.shape(a), &[2, 4, 26, 26]);
        for row in tape.value(a).data().chunks(26) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
    }
    let logits = tape.value(f.logits);
    assert!(logits.is_finite());
}

#[test]
fn spatial_chain_for_convolutional_families() {
    for arch in [ArchKind::Cnn, ArchKind::ResNetD4, ArchKind::Nin, ArchKind::SEResNetD4] {
        let m = Model::<f32>::build(ModelSpec::new(arch, 4, 0)).unwrap();
        let mut tape = Tape::inference();
        let x = tape.constant(batch(1, 0));
        let f = m.forward(&mut tape, x).unwrap();
        let sizes: Vec<usize> = f.trace.spatial.iter().map(|(_, hw)| hw[0]).collect();
        assert_eq!(sizes, vec![40, 20, 10, 5], "{arch}");
    }
}

#[test]
fn se_resnet_has_five_gates_in_unit_interval() {
    let m = Model::<f32>::build(ModelSpec::new(ArchKind::SEResNetD4, 4, 0)).unwrap();
    let mut tape = Tape::inference();
    let x = tape.constant(batch(2, 5));
    let f = m.forward(&mut tape, x).unwrap();
    assert_eq!(f.trace.se_gates.len(), 5);
    for &g in &f.trace.se_gates {
        assert!(tape.value(g).data().iter().all(|v| (0.0..=1.0).contains(v)));
    }
}
