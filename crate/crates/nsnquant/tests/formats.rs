use nsnquant::formats::*;
use nsnquant_core::codebook::{kmeans_init, BitMode, Codebook};
use nsnquant_core::kvcache::{CacheConfig, KvCacheState};
use nsnquant_core::nsn::nsn_forward;
use nsnquant_core::tensor::sample_standard_normal;
use nsnquant_core::vq::{quantize_chunk, QuantConfig, ScalarPrecision, ScaleStrategy};
use nsnquant_core::{SeededRng, Tensor2D};
use proptest::prelude::*;

fn small_codebook(mode: BitMode, seed: u64) -> Codebook {
    kmeans_init(&mut SeededRng::new(seed), mode, 4096, 4).unwrap()
}

#[test]
fn tensor_roundtrip_binary_and_json() {
    let t = sample_standard_normal(&mut SeededRng::new(1), 7, 5);
    assert_eq!(decode_tensor(&encode_tensor(&t)).unwrap(), t);

    let dir = tempfile::tempdir().unwrap();
    let bin = dir.path().join("t.bin");
    write_tensor_file(&bin, &t).unwrap();
    assert_eq!(read_tensor_file(&bin).unwrap(), t);

    let json = dir.path().join("t.json");
    std::fs::write(
        &json,
        r#"{"rows": 2, "cols": 2, "data": [1.0, -2.5, 0.0, 4.0]}"#,
    )
    .unwrap();
    let back = read_tensor_file(&json).unwrap();
    assert_eq!(
        back,
        Tensor2D::new(2, 2, vec![1.0, -2.5, 0.0, 4.0]).unwrap()
    );
}

#[test]
fn tensor_json_with_wrong_length_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let json = dir.path().join("t.json");
    std::fs::write(&json, r#"{"rows": 2, "cols": 2, "data": [1.0]}"#).unwrap();
    assert!(read_tensor_file(&json).is_err());
}

#[test]
fn codebook_roundtrip_is_bit_exact() {
    for mode in [BitMode::OneBit, BitMode::TwoBit] {
        let cb = small_codebook(mode, 2);
        for cb in [cb.clone(), cb.pack4()] {
            let bytes = encode_codebook(&cb);
            let back = decode_codebook(&bytes).unwrap();
            assert_eq!(encode_codebook(&back), bytes);
            for (a, b) in cb.entries().iter().zip(back.entries()) {
                for (x, y) in a.iter().zip(b) {
                    assert_eq!(x.to_bits(), y.to_bits());
                }
            }
            assert_eq!(back.bit_mode(), mode);
            assert_eq!(back.packed4(), cb.packed4());
        }
    }
}

#[test]
fn codebook_rejects_bad_headers() {
    let bytes = encode_codebook(&small_codebook(BitMode::TwoBit, 3));
    assert!(matches!(decode_codebook(&[]), Err(FormatError::Empty)));

    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(matches!(
        decode_codebook(&bad),
        Err(FormatError::BadMagic { .. })
    ));

    let mut bad = bytes.clone();
    bad[4..6].copy_from_slice(&99u16.to_le_bytes());
    assert!(matches!(
        decode_codebook(&bad),
        Err(FormatError::UnsupportedVersion(99))
    ));

    assert!(matches!(
        decode_codebook(&bytes[..bytes.len() - 3]),
        Err(FormatError::Truncated(_))
    ));

    let mut long = bytes.clone();
    long.push(0);
    assert!(matches!(
        decode_codebook(&long),
        Err(FormatError::TrailingBytes(1))
    ));
}

#[test]
fn empty_codebook_file_is_an_error() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("empty.cb");
    std::fs::write(&path, b"").unwrap();
    assert!(read_codebook_file(&path).is_err());
}

#[test]
fn chunk_roundtrip_all_precisions() {
    let mut rng = SeededRng::new(4);
    for mode in [BitMode::OneBit, BitMode::TwoBit] {
        let cb = small_codebook(mode, 5);
        for (double_quant, precision) in [
            (true, ScalarPrecision::Half),
            (false, ScalarPrecision::Half),
            (false, ScalarPrecision::Single),
        ] {
            let nsn = nsn_forward(&sample_standard_normal(&mut rng, 48, 64)).unwrap();
            let cfg = QuantConfig {
                strategy: ScaleStrategy::ParallelPreserving,
                double_quant,
                precision,
                residual_size: 48,
                ..QuantConfig::default()
            };
            let qc = quantize_chunk(&nsn.normalized, &nsn.byproducts, &cb, &cfg).unwrap();
            let bytes = encode_chunk(&qc, 48).unwrap();
            let (back, r) = decode_chunk(&bytes).unwrap();
            assert_eq!(r, 48);
            assert_eq!(back, qc);
        }
    }
}

#[test]
fn snapshot_roundtrip_and_bypass_rejected() {
    let mut rng = SeededRng::new(6);
    let cb = small_codebook(BitMode::TwoBit, 7);
    let cfg = CacheConfig {
        d: 64,
        residual_size: 32,
        ..CacheConfig::default()
    };
    let mut state = KvCacheState::new(cfg).unwrap();
    let k = sample_standard_normal(&mut rng, 77, 64);
    let v = sample_standard_normal(&mut rng, 77, 64);
    state.append(&k, &v, &cb, &cb).unwrap();
    let back = decode_snapshot(&encode_snapshot(&state).unwrap()).unwrap();
    assert_eq!(back, state);

    let bypass = KvCacheState::new(CacheConfig {
        bypass_vq: true,
        ..cfg
    })
    .unwrap();
    assert!(encode_snapshot(&bypass).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn tensor_roundtrip_any_shape(rows in 0usize..12, cols in 1usize..12, seed in any::<u64>()) {
        let t = sample_standard_normal(&mut SeededRng::new(seed), rows, cols);
        let bytes = encode_tensor(&t);
        prop_assert_eq!(bytes.len(), 12 + 4 * rows * cols);
        prop_assert_eq!(decode_tensor(&bytes).unwrap(), t);
    }

    #[test]
    fn truncated_tensor_never_panics(cut in 0usize..40) {
        let t = sample_standard_normal(&mut SeededRng::new(1), 3, 3);
        let bytes = encode_tensor(&t);
        let cut = cut.min(bytes.len() - 1);
        prop_assert!(decode_tensor(&bytes[..cut]).is_err());
    }
}
