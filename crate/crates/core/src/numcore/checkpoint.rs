//! Text container for parameters: a header line per parameter
//! (`name decay rank dims...`) followed by one line of row-major values
//! written with 17 significant digits, which round-trips `f64` exactly.

use std::io::{BufRead, Write};

use super::param::{ParamStore, Parameter};
use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

const MAGIC: &str = "# hiercrf-params v1";

pub fn write_params<T: Scalar, W: Write>(store: &ParamStore<T>, mut w: W) -> Result<()> {
    writeln!(w, "{MAGIC}")?;
    for p in store.iter() {
        if p.name.is_empty() || p.name.contains(char::is_whitespace) {
            return Err(Error::invalid(format!("parameter name {:?} is not serializable", p.name)));
        }
        let dims: Vec<String> = p.value.shape().iter().map(usize::to_string).collect();
        writeln!(w, "{} {} {} {}", p.name, u8::from(p.decay), dims.len(), dims.join(" "))?;
        let vals: Vec<String> = p.value.data().iter().map(|x| format!("{:.16e}", x.as_f64())).collect();
        writeln!(w, "{}", vals.join(" "))?;
    }
    Ok(())
}

pub fn read_params<T: Scalar, R: BufRead>(r: R, origin: &str) -> Result<ParamStore<T>> {
    let mut lines = r.lines().enumerate();
    let bad = |line: usize, msg: &str| Error::parse(origin, line, msg);
    match lines.next() {
        Some((_, Ok(l))) if l.trim() == MAGIC => {}
        Some((_, Err(e))) => return Err(e.into()),
        _ => return Err(bad(1, "missing parameter file header")),
    }
    let mut store = ParamStore::new();
    while let Some((i, header)) = lines.next() {
        let header = header?;
        if header.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = header.split_whitespace().collect();
        if fields.len() < 4 {
            return Err(bad(i + 1, "expected `name decay rank dims...`"));
        }
        let decay = match fields[1] {
            "0" => false,
            "1" => true,
            _ => return Err(bad(i + 1, "decay flag must be 0 or 1")),
        };
        let rank: usize = fields[2].parse().map_err(|_| bad(i + 1, "bad rank"))?;
        if fields.len() != 3 + rank {
            return Err(bad(i + 1, "rank does not match dimension count"));
        }
        let shape = fields[3..]
            .iter()
            .map(|d| d.parse::<usize>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|_| bad(i + 1, "bad dimension"))?;
        let (j, body) = lines.next().ok_or_else(|| bad(i + 2, "missing values line"))?;
        let data = body?
            .split_whitespace()
            .map(|s| s.parse::<f64>().map(T::of))
            .collect::<std::result::Result<Vec<T>, _>>()
            .map_err(|_| bad(j + 1, "bad value"))?;
        let value = Tensor::new(shape, data).map_err(|e| bad(j + 1, &e.to_string()))?;
        store.insert(Parameter::new(fields[0], value, decay))?;
    }
    Ok(store)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numcore::Init;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    proptest! {
        #[test]
        fn text_round_trip_is_bit_exact(vals in prop::collection::vec(any::<f64>().prop_filter("finite", |x| x.is_finite()), 1..40)) {
            let mut store = ParamStore::<f64>::new();
            store.insert(Parameter::new("v", Tensor::vector(vals.clone()), false)).unwrap();
            let mut buf = Vec::new();
            write_params(&store, &mut buf).unwrap();
            let back: ParamStore<f64> = read_params(&buf[..], "mem").unwrap();
            let got = back.value(back.find("v").unwrap()).data().to_vec();
            prop_assert_eq!(got.iter().map(|x| x.to_bits()).collect::<Vec<_>>(),
                            vals.iter().map(|x| x.to_bits()).collect::<Vec<_>>());
        }
    }

    #[test]
    fn store_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut store = ParamStore::<f64>::new();
        store.add("w", &[3, 4], Init::Glorot, true, &mut rng).unwrap();
        store.add("b", &[4], Init::Zeros, false, &mut rng).unwrap();
        let mut buf = Vec::new();
        write_params(&store, &mut buf).unwrap();
        let back: ParamStore<f64> = read_params(&buf[..], "mem").unwrap();
        assert_eq!(back, store);
    }

    #[test]
    fn malformed_input_reports_line() {
        let text = "# hiercrf-params v1\nw 1 2 2 2\n1 2 3\n";
        let err = read_params::<f64, _>(text.as_bytes(), "ckpt").unwrap_err().to_string();
        assert!(err.starts_with("ckpt:3"), "{err}");
    }
}
