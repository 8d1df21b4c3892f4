use crate::tensor::{Storage, Tensor};
use crate::{Error, Result};

fn outer_inner(shape: &[usize], axis: usize) -> (usize, usize) {
    (
        shape[..axis].iter().product(),
        shape[axis + 1..].iter().product(),
    )
}

/// Splits `x` along `axis` into consecutive pieces of the given extents.
pub fn split(x: &Tensor, axis: usize, parts: &[usize]) -> Result<Vec<Tensor>> {
    let shape = x.shape();
    if axis >= shape.len() {
        return Err(Error::op("Split", format!("axis {axis} out of range for {shape:?}")));
    }
    let extent = shape[axis];
    if parts.iter().sum::<usize>() != extent || parts.contains(&0) {
        return Err(Error::op(
            "Split",
            format!("parts {parts:?} do not partition extent {extent}"),
        ));
    }
    let (outer, inner) = outer_inner(shape, axis);
    let mut start = 0;
    let mut out = Vec::with_capacity(parts.len());
    for &len in parts {
        let mut piece_shape = shape.to_vec();
        piece_shape[axis] = len;
        fn copy<T: Copy>(v: &[T], outer: usize, extent: usize, inner: usize, start: usize, len: usize) -> Vec<T> {
            let mut o = Vec::with_capacity(outer * len * inner);
            for b in 0..outer {
                let base = (b * extent + start) * inner;
                o.extend_from_slice(&v[base..base + len * inner]);
            }
            o
        }
        let data = match x.storage() {
            Storage::F32(v) => Storage::F32(copy(v, outer, extent, inner, start, len)),
            Storage::F64(v) => Storage::F64(copy(v, outer, extent, inner, start, len)),
        };
        out.push(Tensor::new(piece_shape, data)?);
        start += len;
    }
    Ok(out)
}

/// Concatenates along `axis`; all other extents and dtypes must agree.
pub fn concat(parts: &[&Tensor], axis: usize) -> Result<Tensor> {
    let first = parts
        .first()
        .ok_or_else(|| Error::op("Concat", "no inputs"))?;
    let rank = first.shape().len();
    if axis >= rank {
        return Err(Error::op("Concat", format!("axis {axis} out of range for rank {rank}")));
    }
    let mut extent = 0;
    for p in parts {
        let same_rest = p.shape().len() == rank
            && p.shape()
                .iter()
                .zip(first.shape())
                .enumerate()
                .all(|(i, (a, b))| i == axis || a == b);
        if !same_rest || p.dtype() != first.dtype() {
            return Err(Error::op(
                "Concat",
                format!("cannot join {:?} with {:?} on axis {axis}", first.shape(), p.shape()),
            ));
        }
        extent += p.shape()[axis];
    }
    let mut shape = first.shape().to_vec();
    shape[axis] = extent;
    let (outer, inner) = outer_inner(&shape, axis);
    macro_rules! join {
        ($variant:ident) => {{
            let slices: Vec<&[_]> = parts
                .iter()
                .map(|p| match p.storage() {
                    Storage::$variant(v) => v.as_slice(),
                    _ => unreachable!(),
                })
                .collect();
            let mut o = Vec::with_capacity(outer * extent * inner);
            for b in 0..outer {
                for (s, p) in slices.iter().zip(parts) {
                    let len = p.shape()[axis] * inner;
                    o.extend_from_slice(&s[b * len..(b + 1) * len]);
                }
            }
            Storage::$variant(o)
        }};
    }
    let data = match first.storage() {
        Storage::F32(_) => join!(F32),
        Storage::F64(_) => join!(F64),
    };
    Tensor::new(shape, data)
}

/// Resolves an ONNX-style target shape: `0` copies the input extent, one
/// `-1` is inferred.
pub fn resolve_reshape(input: &[usize], target: &[i64]) -> Result<Vec<usize>> {
    let total: usize = input.iter().product();
    let mut out = Vec::with_capacity(target.len());
    let mut infer = None;
    for (i, &t) in target.iter().enumerate() {
        match t {
            -1 if infer.is_none() => {
                infer = Some(i);
                out.push(1);
            }
            0 => out.push(*input.get(i).ok_or_else(|| {
                Error::op("Reshape", format!("0 at position {i} has no input extent to copy"))
            })?),
            t if t > 0 => out.push(t as usize),
            _ => return Err(Error::op("Reshape", format!("invalid target shape {target:?}"))),
        }
    }
    let known: usize = out.iter().product();
    if let Some(i) = infer {
        if known == 0 || total % known != 0 {
            return Err(Error::op(
                "Reshape",
                format!("cannot infer -1 in {target:?} for {total} elements"),
            ));
        }
        out[i] = total / known;
    }
    if out.iter().product::<usize>() != total {
        return Err(Error::op(
            "Reshape",
            format!("{input:?} has {total} elements, target {target:?} does not"),
        ));
    }
    Ok(out)
}
