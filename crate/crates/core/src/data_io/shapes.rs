//! Operator benchmark shape lists: CSV rows `op,params...`.
//!
//! ```text
//! # op,M,K,N
//! gemm,2560,2560,64
//! # op,N,C,H,W,F,kH,kW,stride,pad
//! conv,16,3,224,224,64,3,3,1,1
//! ```

use crate::error::DataError;
use crate::operators::{ConvAttrs, OpKind};
use crate::{DType, Result, TensorDesc};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ShapeConfig {
    Gemm { m: usize, k: usize, n: usize },
    Conv { n: usize, c: usize, h: usize, w: usize, f: usize, kh: usize, kw: usize, stride: usize, pad: usize },
}

impl ShapeConfig {
    pub fn label(&self) -> String {
        match *self {
            ShapeConfig::Gemm { m, k, n } => format!("gemm_{m}x{k}x{n}"),
            ShapeConfig::Conv { n, c, h, w, f, kh, kw, stride, pad } => {
                format!("conv_n{n}_c{c}_{h}x{w}_f{f}_k{kh}x{kw}_s{stride}_p{pad}")
            }
        }
    }

    /// Operator and input descriptors (bias omitted).
    pub fn instantiate(&self, dtype: DType) -> Result<(OpKind, Vec<TensorDesc>)> {
        Ok(match *self {
            ShapeConfig::Gemm { m, k, n } => {
                (OpKind::Gemm, vec![TensorDesc::new(dtype, [m, k])?, TensorDesc::new(dtype, [k, n])?])
            }
            ShapeConfig::Conv { n, c, h, w, f, kh, kw, stride, pad } => {
                let attrs = ConvAttrs::new([kh, kw]).with_strides([stride, stride]).with_pads([pad; 4]);
                let descs = vec![TensorDesc::new(dtype, [n, c, h, w])?, TensorDesc::new(dtype, [f, c, kh, kw])?];
                let op = OpKind::Conv(attrs);
                op.infer(&descs)?;
                (op, descs)
            }
        })
    }
}

pub fn parse_shape_list(text: &str) -> Result<Vec<ShapeConfig>> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let mut out = Vec::new();
    for rec in reader.records() {
        let rec = rec.map_err(|e| DataError::ShapeRow {
            row: e.position().map_or(0, |p| p.line() as usize),
            msg: e.to_string(),
        })?;
        let row = rec.position().map_or(0, |p| p.line() as usize);
        let bad = |msg: String| DataError::ShapeRow { row, msg };
        if rec.iter().all(str::is_empty) {
            continue;
        }
        let nums: Vec<usize> = rec
            .iter()
            .skip(1)
            .map(|f| f.parse::<usize>().map_err(|_| bad(format!("`{f}` is not a non-negative integer"))))
            .collect::<std::result::Result<_, _>>()?;
        let op = &rec[0];
        let expect = match op {
            "gemm" => 3,
            "conv" => 9,
            other => return Err(bad(format!("unknown op `{other}`")).into()),
        };
        if nums.len() != expect {
            return Err(bad(format!("{op} takes {expect} parameters, got {}", nums.len())).into());
        }
        if nums.iter().enumerate().any(|(i, &v)| v == 0 && !(op == "conv" && i == 8)) {
            return Err(bad("extents must be positive".into()).into());
        }
        let cfg = if op == "gemm" {
            ShapeConfig::Gemm { m: nums[0], k: nums[1], n: nums[2] }
        } else {
            ShapeConfig::Conv {
                n: nums[0],
                c: nums[1],
                h: nums[2],
                w: nums[3],
                f: nums[4],
                kh: nums[5],
                kw: nums[6],
                stride: nums[7],
                pad: nums[8],
            }
        };
        cfg.instantiate(DType::F32).map_err(|e| bad(e.to_string()))?;
        out.push(cfg);
    }
    Ok(out)
}
