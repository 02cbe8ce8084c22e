use facescale::emb::{decode_emb, encode_emb, file_len, read_emb, write_emb};
use facescale::{EmbeddingDataset, Error, Matrix};
use proptest::prelude::*;

fn dataset(n: usize, d: usize, raw: &[f32], labels: &[u32]) -> EmbeddingDataset<f32> {
    let rows: Vec<Vec<f32>> = (0..n)
        .map(|i| {
            let mut r: Vec<f32> = raw[i * d..(i + 1) * d].to_vec();
            r[i % d] += 1.0;
            r
        })
        .collect();
    let m = Matrix::from_vec(n, d, rows.concat()).unwrap();
    EmbeddingDataset::from_raw(&m, labels.iter().map(|&l| l as usize).collect()).unwrap()
}

fn arb_dataset() -> impl Strategy<Value = EmbeddingDataset<f32>> {
    (0usize..40, 1usize..24).prop_flat_map(|(n, d)| {
        (
            proptest::collection::vec(-0.3f32..0.3, n * d),
            proptest::collection::vec(0u32..50, n),
        )
            .prop_map(move |(raw, labels)| dataset(n, d, &raw, &labels))
    })
}

proptest! {
    #[test]
    fn round_trip_is_bit_exact(ds in arb_dataset()) {
        let bytes = encode_emb(&ds).unwrap();
        prop_assert_eq!(bytes.len() as u64, file_len(ds.n() as u64, ds.dim() as u64).unwrap());
        let back = decode_emb::<f32>(&bytes).unwrap();
        let bits = |m: &Matrix<f32>| m.as_slice().iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        prop_assert_eq!(bits(&back.features), bits(&ds.features));
        prop_assert_eq!(&back.labels, &ds.labels);
        prop_assert_eq!(encode_emb(&back).unwrap(), bytes);
    }

    #[test]
    fn any_single_bit_flip_is_detected(ds in arb_dataset(), pos in any::<prop::sample::Index>(), bit in 0u8..8) {
        let mut bytes = encode_emb(&ds).unwrap();
        let i = pos.index(bytes.len());
        bytes[i] ^= 1 << bit;
        prop_assert!(decode_emb::<f32>(&bytes).is_err());
    }

    #[test]
    fn every_proper_prefix_is_rejected(ds in arb_dataset(), cut in any::<prop::sample::Index>()) {
        let bytes = encode_emb(&ds).unwrap();
        let len = cut.index(bytes.len());
        let err = decode_emb::<f32>(&bytes[..len]).unwrap_err();
        prop_assert!(matches!(err, Error::Truncated { .. }), "{err}");
    }
}

#[test]
fn files_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("x.emb");
    let ds = dataset(3, 4, &[0.1; 12], &[0, 2, 1]);
    write_emb(&ds, &path).unwrap();
    let back: EmbeddingDataset<f32> = read_emb(&path).unwrap();
    assert_eq!(back, ds);
    assert!(matches!(read_emb::<f32>(dir.path().join("missing.emb")), Err(Error::Io(_))));
}

#[test]
fn f64_datasets_are_stored_at_single_precision() {
    let m = Matrix::from_rows(&[vec![0.6f64, 0.8], vec![1.0 / 2f64.sqrt(), 1.0 / 2f64.sqrt()]]).unwrap();
    let ds = EmbeddingDataset::new(m, vec![0, 1], 2).unwrap();
    let back = decode_emb::<f64>(&encode_emb(&ds).unwrap()).unwrap();
    for (a, b) in back.features.as_slice().iter().zip(ds.features.as_slice()) {
        assert_eq!(*a, *b as f32 as f64);
    }
}
