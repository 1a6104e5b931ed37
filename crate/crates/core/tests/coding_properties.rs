use dlf_core::cdf::{CdfTable, TOTAL_FREQ};
use dlf_core::container::{BitContainer, ContainerError};
use dlf_core::laplace::{symbol_index, Laplace};
use dlf_core::packing::{bits_per_index, pack_indices, unpack_indices};
use dlf_core::range_coder::{range_decode, range_encode};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_table(rng: &mut ChaCha8Rng, n: usize) -> CdfTable {
    let pmf: Vec<f64> = (0..n)
        .map(|_| {
            let u: f64 = rng.random();
            u * u * u
        })
        .collect();
    CdfTable::from_pmf(&pmf).unwrap()
}

fn ideal_bits(tables: &[CdfTable], symbols: &[usize]) -> f64 {
    tables.iter().zip(symbols).map(|(t, &s)| t.cost_bits(s)).sum()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn range_coder_round_trips(seed in any::<u64>(), len in 0usize..400, alphabet in 1usize..300) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let tables: Vec<CdfTable> = (0..len).map(|_| random_table(&mut rng, alphabet)).collect();
        // Draw symbols from the tables themselves so probable ones dominate.
        let symbols: Vec<usize> = tables
            .iter()
            .map(|t| t.find(rng.random_range(0..TOTAL_FREQ)))
            .collect();
        let bytes = range_encode(&symbols, |i, _| Some(tables[i].clone())).unwrap();
        let back = range_decode(&bytes, |i, _| Some(tables[i].clone()), len).unwrap();
        prop_assert_eq!(&back, &symbols);
        let ideal = ideal_bits(&tables, &symbols);
        let actual = 8.0 * bytes.len() as f64;
        prop_assert!(actual <= ideal + 64.0 + 0.01 * ideal, "actual {} ideal {}", actual, ideal);
    }

    #[test]
    fn packer_round_trips(indices in proptest::collection::vec(any::<u32>(), 0..200), codebook in 1u32..70_000) {
        let indices: Vec<u32> = indices.iter().map(|&i| i % codebook).collect();
        let bytes = pack_indices(&indices, codebook).unwrap();
        prop_assert_eq!(bytes.len(), (indices.len() * bits_per_index(codebook) as usize).div_ceil(8));
        prop_assert_eq!(unpack_indices(&bytes, codebook, indices.len()).unwrap(), indices);
    }

    #[test]
    fn container_round_trips(
        lambda_index in any::<u8>(),
        w in any::<u32>(),
        h in any::<u32>(),
        semantic in proptest::collection::vec(any::<u8>(), 0..64),
        detail in proptest::collection::vec(any::<u8>(), 0..64),
    ) {
        let c = BitContainer { lambda_index, orig_width: w, orig_height: h, semantic, detail };
        let bytes = c.to_bytes().unwrap();
        prop_assert_eq!(bytes.len(), 22 + c.semantic.len() + c.detail.len());
        prop_assert_eq!(&bytes[..4], b"DLF1");
        prop_assert_eq!(BitContainer::from_bytes(&bytes).unwrap(), c);
    }

    #[test]
    fn container_parser_is_total(bytes in proptest::collection::vec(any::<u8>(), 0..64)) {
        match BitContainer::from_bytes(&bytes) {
            Ok(c) => prop_assert_eq!(c.to_bytes().unwrap(), bytes),
            Err(ContainerError::BadMagic(_)
                | ContainerError::UnsupportedVersion(_)
                | ContainerError::Truncated { .. }
                | ContainerError::TrailingBytes(_)) => {}
            Err(e) => prop_assert!(false, "unexpected error {e}"),
        }
    }
}

#[test]
fn adaptive_tables_round_trip() {
    // Table for symbol i is a Laplace centred on the previous symbol.
    let provider = |_: usize, prev: &[usize]| {
        let mu = prev.last().map_or(0.0, |&s| s as f64 - 127.0);
        Laplace::new(mu, 1.5).cdf_table().ok()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut symbols = Vec::new();
    let mut cur: i32 = 0;
    for _ in 0..5000 {
        cur = (cur + rng.random_range(-3..=3)).clamp(-127, 127);
        symbols.push(symbol_index(cur));
    }
    let bytes = range_encode(&symbols, provider).unwrap();
    assert_eq!(range_decode(&bytes, provider, symbols.len()).unwrap(), symbols);
}

#[test]
fn ten_thousand_random_symbols() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let tables: Vec<CdfTable> = (0..10_000)
        .map(|_| {
            let n = rng.random_range(2..=255);
            random_table(&mut rng, n)
        })
        .collect();
    let symbols: Vec<usize> = tables
        .iter()
        .map(|t| rng.random_range(0..t.alphabet_size()))
        .collect();
    let bytes = range_encode(&symbols, |i, _| Some(tables[i].clone())).unwrap();
    assert_eq!(range_decode(&bytes, |i, _| Some(tables[i].clone()), symbols.len()).unwrap(), symbols);
}
