//! Per-worker communication endpoint: frame bookkeeping, volume accounting
//! and the collectives used by the training schemes.

use std::ops::{Add, Div};
use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::transport::Transport;
use super::wire::{decode_dense, encode_dense, Frame, MsgType, SparsePayload, HEADER_LEN};
use crate::error::CommError;
use crate::tensor::Element;
use crate::{DType, Error, Result, Tensor};

/// Communication counters. Byte counts are payload bytes; every frame adds
/// [`HEADER_LEN`] bytes of header on top.
///
/// `logical` counts the buffers handed to the communication layer, once per
/// call and independent of the algorithm moving them: an allreduce of `M`
/// bytes adds `M`, a parameter-server push and pull add `M` each.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Volume {
    pub bytes_sent: u64,
    pub bytes_recv: u64,
    pub msgs_sent: u64,
    pub msgs_recv: u64,
    pub logical: u64,
}

impl Volume {
    pub fn frame_bytes_sent(&self) -> u64 {
        self.bytes_sent + self.msgs_sent * HEADER_LEN as u64
    }

    fn minus(&self, o: &Volume) -> Volume {
        Volume {
            bytes_sent: self.bytes_sent - o.bytes_sent,
            bytes_recv: self.bytes_recv - o.bytes_recv,
            msgs_sent: self.msgs_sent - o.msgs_sent,
            msgs_recv: self.msgs_recv - o.msgs_recv,
            logical: self.logical - o.logical,
        }
    }

    pub fn plus(&self, o: &Volume) -> Volume {
        Volume {
            bytes_sent: self.bytes_sent + o.bytes_sent,
            bytes_recv: self.bytes_recv + o.bytes_recv,
            msgs_sent: self.msgs_sent + o.msgs_sent,
            msgs_recv: self.msgs_recv + o.msgs_recv,
            logical: self.logical + o.logical,
        }
    }
}

/// Traffic of one worker: initial synchronization, then one entry per
/// training step.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CommStats {
    pub rank: usize,
    pub setup: Volume,
    pub per_step: Vec<Volume>,
}

impl CommStats {
    pub fn new(rank: usize) -> Self {
        CommStats { rank, ..Default::default() }
    }

    /// Sum over training steps (setup excluded).
    pub fn training(&self) -> Volume {
        self.per_step.iter().fold(Volume::default(), |a, v| a.plus(v))
    }

    pub fn total(&self) -> Volume {
        self.setup.plus(&self.training())
    }

    /// Mean logical bytes per training step, 0 without steps.
    pub fn logical_per_step(&self) -> f64 {
        if self.per_step.is_empty() {
            0.0
        } else {
            self.training().logical as f64 / self.per_step.len() as f64
        }
    }

    /// Mean payload bytes sent per training step, 0 without steps.
    pub fn sent_per_step(&self) -> f64 {
        if self.per_step.is_empty() {
            0.0
        } else {
            self.training().bytes_sent as f64 / self.per_step.len() as f64
        }
    }
}

/// Accumulates counters and closes them into [`CommStats`] step entries.
#[derive(Debug, Clone, Default)]
pub(crate) struct Meter {
    pub stats: CommStats,
    running: Volume,
    mark: Volume,
    in_setup: bool,
}

impl Meter {
    pub fn new(rank: usize) -> Self {
        Meter { stats: CommStats::new(rank), in_setup: true, ..Default::default() }
    }

    pub fn sent(&mut self, payload: usize) {
        self.running.bytes_sent += payload as u64;
        self.running.msgs_sent += 1;
    }

    pub fn received(&mut self, payload: usize) {
        self.running.bytes_recv += payload as u64;
        self.running.msgs_recv += 1;
    }

    pub fn logical(&mut self, bytes: usize) {
        self.running.logical += bytes as u64;
    }

    /// Closes the current interval as setup (first call) or as a step.
    pub fn close(&mut self) {
        let delta = self.running.minus(&self.mark);
        self.mark = self.running;
        if std::mem::replace(&mut self.in_setup, false) {
            self.stats.setup = delta;
        } else {
            self.stats.per_step.push(delta);
        }
    }
}

/// Chunk `c` of `p` over `n` elements.
fn chunk(n: usize, p: usize, c: usize) -> std::ops::Range<usize> {
    c * n / p..(c + 1) * n / p
}

fn elems<T: Element>(bytes: &[u8], n: usize) -> Result<Vec<T>> {
    let t = decode_dense(bytes, T::DTYPE, &[n])?;
    Ok(t.data::<T>()?.to_vec())
}

fn le_bytes<T: Element>(v: &[T]) -> Vec<u8> {
    let mut out = Vec::with_capacity(std::mem::size_of_val(v));
    v.iter().for_each(|x| x.to_le(&mut out));
    out
}

/// The mean a ring allreduce produces, computed in one place: chunk `c` is
/// summed in rank order starting at rank `c` (`x_c + x_{c+1} + …`, wrapping),
/// in the element type, then divided by the number of parts.
pub fn ring_order_average(parts: &[&Tensor]) -> Result<Tensor> {
    let first = parts.first().ok_or_else(|| Error::InvalidArgument("nothing to average".into()))?;
    if parts.iter().any(|t| t.shape() != first.shape() || t.dtype() != first.dtype()) {
        return Err(Error::ShapeMismatch("averaged tensors differ in shape or dtype".into()));
    }
    fn go<T: Element>(parts: &[&Tensor]) -> Result<Vec<T>> {
        let p = parts.len();
        let views: Vec<&[T]> = parts.iter().map(|t| t.data::<T>()).collect::<Result<_>>()?;
        let n = views[0].len();
        let mut out = vec![T::zero(); n];
        for c in 0..p {
            for i in chunk(n, p, c) {
                let mut acc = views[c][i];
                for k in 1..p {
                    acc += views[(c + k) % p][i];
                }
                out[i] = acc / T::from_f64(p as f64);
            }
        }
        Ok(out)
    }
    let shape = first.shape().to_vec();
    match first.dtype() {
        DType::F32 => Tensor::from_vec(shape, go::<f32>(parts)?),
        DType::F64 => Tensor::from_vec(shape, go::<f64>(parts)?),
    }
}

/// Merges two sparse contributions, lower rank first. Shared indices take
/// the count-weighted mean of their values.
pub fn merge_sparse(a: &SparsePayload, b: &SparsePayload) -> SparsePayload {
    let (mut i, mut j) = (0, 0);
    let mut out = SparsePayload { indices: Vec::new(), values: Vec::new(), counts: Some(Vec::new()) };
    let counts = out.counts.as_mut().unwrap();
    while i < a.nnz() || j < b.nnz() {
        let ia = a.indices.get(i).copied().unwrap_or(u32::MAX);
        let ib = b.indices.get(j).copied().unwrap_or(u32::MAX);
        if ia < ib || j == b.nnz() {
            out.indices.push(ia);
            out.values.push(a.values[i]);
            counts.push(a.count(i));
            i += 1;
        } else if ib < ia || i == a.nnz() {
            out.indices.push(ib);
            out.values.push(b.values[j]);
            counts.push(b.count(j));
            j += 1;
        } else {
            let (ca, cb) = (a.count(i) as f64, b.count(j) as f64);
            let mean = (a.values[i] as f64 * ca + b.values[j] as f64 * cb) / (ca + cb);
            out.indices.push(ia);
            out.values.push(mean as f32);
            counts.push(a.count(i) + b.count(j));
            i += 1;
            j += 1;
        }
    }
    out
}

/// Top-`⌈d·n⌉` entries of `acc` by magnitude (ties to the lower index),
/// as a raw sparse contribution, plus what stays behind. Kept and sent
/// entries add back to `acc` exactly.
pub fn topk_split(acc: &Tensor, density: f64) -> Result<(SparsePayload, Tensor)> {
    if !(density > 0.0 && density <= 1.0) {
        return Err(Error::InvalidArgument(format!("density {density} outside (0, 1]")));
    }
    let v = acc.to_f64_vec();
    let n = v.len();
    let k = ((density * n as f64).ceil() as usize).min(n);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&x, &y| v[y].abs().total_cmp(&v[x].abs()).then(x.cmp(&y)));
    let mut picked = order[..k].to_vec();
    picked.sort_unstable();
    let mut rest = v.clone();
    let mut values = Vec::with_capacity(k);
    for &i in &picked {
        let sent = v[i] as f32;
        values.push(sent);
        rest[i] = v[i] - sent as f64;
    }
    let residual = Tensor::from_f64_values(acc.dtype(), acc.shape().to_vec(), &rest);
    Ok((SparsePayload { indices: picked.iter().map(|&i| i as u32).collect(), values, counts: None }, residual))
}

/// A worker's view of the world.
pub struct Comm {
    transport: Box<dyn Transport>,
    timeout: Duration,
    pub(crate) meter: Meter,
    last_in: Vec<Option<u64>>,
    last_out: Vec<Option<u64>>,
}

impl Comm {
    pub fn new(transport: Box<dyn Transport>, timeout: Duration) -> Comm {
        let p = transport.world();
        let rank = transport.rank();
        Comm { transport, timeout, meter: Meter::new(rank), last_in: vec![None; p], last_out: vec![None; p] }
    }

    pub fn rank(&self) -> usize {
        self.transport.rank()
    }

    pub fn world(&self) -> usize {
        self.transport.world()
    }

    pub fn stats(&self) -> &CommStats {
        &self.meter.stats
    }

    /// Closes the running interval (setup first, then one per step).
    pub fn close_interval(&mut self) {
        self.meter.close();
    }

    pub fn add_logical(&mut self, bytes: usize) {
        self.meter.logical(bytes);
    }

    pub fn send(&mut self, to: usize, ty: MsgType, step: u64, tid: u32, payload: Vec<u8>) -> Result<()> {
        if let Some(prev) = self.last_out[to] {
            if step < prev {
                return Err(CommError::StepOrder { from: self.rank(), to, prev, next: step }.into());
            }
        }
        self.last_out[to] = Some(step);
        let frame = Frame::new(ty, self.rank(), step, tid, payload);
        self.transport.send(to, &frame.encode())?;
        self.meter.sent(frame.payload.len());
        Ok(())
    }

    /// Receives the next frame from `from`, which must be `ty` for `(step, tid)`.
    pub fn recv(&mut self, from: usize, ty: MsgType, step: u64, tid: u32) -> Result<Vec<u8>> {
        let bytes = self.transport.recv(from, self.timeout)?;
        let f = Frame::decode(&bytes)?;
        if f.sender as usize != from {
            return Err(CommError::Frame(format!("frame on channel {from} claims sender {}", f.sender)).into());
        }
        if let Some(prev) = self.last_in[from] {
            if f.step < prev {
                return Err(CommError::StepOrder { from, to: self.rank(), prev, next: f.step }.into());
            }
        }
        self.last_in[from] = Some(f.step);
        if (f.msg_type, f.step, f.tensor_id) != (ty, step, tid) {
            return Err(CommError::Unexpected {
                from,
                expected: format!("{ty:?} step {step} tensor {tid}"),
                got: format!("{:?} step {} tensor {}", f.msg_type, f.step, f.tensor_id),
            }
            .into());
        }
        self.meter.received(f.payload.len());
        Ok(f.payload)
    }

    /// Ring allreduce: `p − 1` reduce-scatter steps then `p − 1` allgather
    /// steps. Every rank ends with the same bits (see [`ring_order_average`]).
    pub fn allreduce_average(&mut self, x: &Tensor, step: u64, tid: u32) -> Result<Tensor> {
        if self.world() == 1 {
            return Ok(x.clone());
        }
        self.meter.logical(x.size_bytes());
        let shape = x.shape().to_vec();
        match x.dtype() {
            DType::F32 => Tensor::from_vec(shape, self.ring::<f32>(x.data()?.to_vec(), step, tid)?),
            DType::F64 => Tensor::from_vec(shape, self.ring::<f64>(x.data()?.to_vec(), step, tid)?),
        }
    }

    fn ring<T: Element + Add<Output = T> + Div<Output = T>>(
        &mut self,
        mut data: Vec<T>,
        step: u64,
        tid: u32,
    ) -> Result<Vec<T>> {
        let (p, r, n) = (self.world(), self.rank(), data.len());
        let right = (r + 1) % p;
        let left = (r + p - 1) % p;
        for s in 0..p - 1 {
            let out = chunk(n, p, (r + p - s) % p);
            self.send(right, MsgType::ArChunk, step, tid, le_bytes(&data[out]))?;
            let inc = chunk(n, p, (r + 2 * p - s - 1) % p);
            let vals = elems::<T>(&self.recv(left, MsgType::ArChunk, step, tid)?, inc.len())?;
            for (d, v) in data[inc].iter_mut().zip(vals) {
                *d = v + *d;
            }
        }
        for d in &mut data[chunk(n, p, (r + 1) % p)] {
            *d = *d / T::from_f64(p as f64);
        }
        for s in 0..p - 1 {
            let out = chunk(n, p, (r + 1 + p - s) % p);
            self.send(right, MsgType::ArChunk, step, tid, le_bytes(&data[out]))?;
            let inc = chunk(n, p, (r + p - s) % p);
            let vals = elems::<T>(&self.recv(left, MsgType::ArChunk, step, tid)?, inc.len())?;
            data[inc].copy_from_slice(&vals);
        }
        Ok(data)
    }

    /// Sparse allreduce of `grad + residual`: sends the top entries,
    /// keeps the rest in `residual`, and merges contributions by recursive
    /// doubling. Needs a power-of-two world.
    pub fn topk_sparse_allreduce(
        &mut self,
        grad: &Tensor,
        residual: &mut Tensor,
        density: f64,
        step: u64,
        tid: u32,
    ) -> Result<Tensor> {
        let (p, r) = (self.world(), self.rank());
        if !p.is_power_of_two() {
            return Err(CommError::World(format!("sparse allreduce needs a power-of-two world, got {p}")).into());
        }
        let acc = crate::tensor::elementwise(crate::tensor::ElementwiseOp::Add, grad, Some(residual))?;
        let (mut mine, rest) = topk_split(&acc, density)?;
        *residual = rest;
        let n = acc.numel();
        let mut round = 1;
        while round < p {
            let partner = r ^ round;
            let payload = mine.encode();
            self.meter.logical(payload.len());
            self.send(partner, MsgType::ArChunk, step, tid, payload)?;
            let theirs = SparsePayload::decode(&self.recv(partner, MsgType::ArChunk, step, tid)?, n)?;
            mine = if r < partner { merge_sparse(&mine, &theirs) } else { merge_sparse(&theirs, &mine) };
            round <<= 1;
        }
        let mut dense = vec![0.0; n];
        for k in 0..mine.nnz() {
            dense[mine.indices[k] as usize] = mine.values[k] as f64 * mine.count(k) as f64 / p as f64;
        }
        Ok(Tensor::from_f64_values(grad.dtype(), grad.shape().to_vec(), &dense))
    }

    /// Mean of this rank's `x` and those of its two ring neighbours,
    /// accumulated in f64 in ascending rank order.
    pub fn neighbor_average(&mut self, x: &Tensor, step: u64, tid: u32) -> Result<Tensor> {
        let (p, r) = (self.world(), self.rank());
        if p == 1 {
            return Ok(x.clone());
        }
        let left = (r + p - 1) % p;
        let right = (r + 1) % p;
        let payload = encode_dense(x);
        self.meter.logical(2 * x.size_bytes());
        self.send(right, MsgType::ParamBcast, step, tid, payload.clone())?;
        self.send(left, MsgType::ParamBcast, step, tid, payload)?;
        let from_left = decode_dense(&self.recv(left, MsgType::ParamBcast, step, tid)?, x.dtype(), x.shape())?;
        let from_right = decode_dense(&self.recv(right, MsgType::ParamBcast, step, tid)?, x.dtype(), x.shape())?;
        let mut terms = [(left, from_left.to_f64_vec()), (r, x.to_f64_vec()), (right, from_right.to_f64_vec())];
        terms.sort_by_key(|t| t.0);
        let avg: Vec<f64> = (0..x.numel()).map(|i| (terms[0].1[i] + terms[1].1[i] + terms[2].1[i]) / 3.0).collect();
        Ok(Tensor::from_f64_values(x.dtype(), x.shape().to_vec(), &avg))
    }

    /// Sends `x` from `root` to every other rank; returns the root's value
    /// everywhere.
    pub fn broadcast(&mut self, root: usize, x: &Tensor, step: u64, tid: u32) -> Result<Tensor> {
        if self.rank() == root {
            for to in (0..self.world()).filter(|&q| q != root) {
                self.send(to, MsgType::ParamBcast, step, tid, encode_dense(x))?;
            }
            Ok(x.clone())
        } else {
            Ok(decode_dense(&self.recv(root, MsgType::ParamBcast, step, tid)?, x.dtype(), x.shape())?)
        }
    }

    /// Parameter-server round for one tensor with `root` as the server:
    /// gradients go up, `update` runs on the root with the ring-order mean,
    /// new parameters come back down.
    pub fn server_round<F>(&mut self, root: usize, grad: &Tensor, step: u64, tid: u32, update: F) -> Result<Tensor>
    where
        F: FnOnce(&Tensor) -> Result<Tensor>,
    {
        let p = self.world();
        if p == 1 {
            return update(grad);
        }
        self.meter.logical(2 * grad.size_bytes());
        if self.rank() == root {
            let mut grads = Vec::with_capacity(p);
            for from in 0..p {
                grads.push(if from == root {
                    grad.clone()
                } else {
                    decode_dense(&self.recv(from, MsgType::GradPush, step, tid)?, grad.dtype(), grad.shape())?
                });
            }
            let refs: Vec<&Tensor> = grads.iter().collect();
            let fresh = update(&ring_order_average(&refs)?)?;
            self.broadcast(root, &fresh, step, tid)
        } else {
            self.send(root, MsgType::GradPush, step, tid, encode_dense(grad))?;
            self.broadcast(root, grad, step, tid)
        }
    }

    /// Everyone reports to rank 0, then rank 0 releases everyone.
    pub fn barrier(&mut self, step: u64) -> Result<()> {
        let p = self.world();
        if self.rank() == 0 {
            for q in 1..p {
                self.recv(q, MsgType::Barrier, step, 0)?;
            }
            for q in 1..p {
                self.send(q, MsgType::Barrier, step, 0, Vec::new())?;
            }
        } else if p > 1 {
            self.send(0, MsgType::Barrier, step, 0, Vec::new())?;
            self.recv(0, MsgType::Barrier, step, 0)?;
        }
        Ok(())
    }

    /// Tells every peer this rank is done.
    pub fn shutdown(&mut self, step: u64) -> Result<()> {
        let me = self.rank();
        for q in (0..self.world()).filter(|&q| q != me) {
            self.send(q, MsgType::Shutdown, step, 0, Vec::new())?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::distributed::transport::sim_world;
    use crate::Rng;

    fn on_world<R: Send>(p: usize, f: impl Fn(&mut Comm) -> R + Sync) -> Vec<R> {
        std::thread::scope(|s| {
            let hs: Vec<_> = sim_world(p, None)
                .into_iter()
                .map(|t| {
                    let f = &f;
                    s.spawn(move || f(&mut Comm::new(Box::new(t), Duration::from_secs(10))))
                })
                .collect();
            hs.into_iter().map(|h| h.join().unwrap()).collect()
        })
    }

    fn random(rank: usize, n: usize, dtype: DType) -> Tensor {
        let mut rng = Rng::new(77, rank as u64);
        let v: Vec<f64> = (0..n).map(|_| rng.uniform_range(-1.0, 1.0)).collect();
        Tensor::from_f64_values(dtype, [n], &v)
    }

    #[test]
    fn two_workers_average() {
        let out = on_world(2, |c| {
            let x = Tensor::full(DType::F32, [5], if c.rank() == 0 { 1.0 } else { 3.0 });
            c.allreduce_average(&x, 0, 0).unwrap()
        });
        for t in out {
            assert_eq!(t.to_f64_vec(), vec![2.0; 5]);
        }
    }

    #[test]
    fn equal_inputs_are_unchanged() {
        let x = random(0, 13, DType::F64);
        for p in [1, 3, 4] {
            for t in on_world(p, |c| c.allreduce_average(&x, 0, 0).unwrap()) {
                for (a, b) in t.to_f64_vec().iter().zip(x.to_f64_vec()) {
                    assert!((a - b).abs() <= 1e-15 * b.abs().max(1.0));
                }
            }
        }
    }

    #[test]
    fn ring_matches_reference_order_bitwise() {
        for (p, n, dtype) in [(2, 7, DType::F32), (3, 10, DType::F32), (4, 33, DType::F64), (5, 3, DType::F32)] {
            let inputs: Vec<Tensor> = (0..p).map(|r| random(r, n, dtype)).collect();
            let expect = ring_order_average(&inputs.iter().collect::<Vec<_>>()).unwrap();
            let got = on_world(p, |c| c.allreduce_average(&inputs[c.rank()], 3, 1).unwrap());
            assert!(got.iter().all(|t| *t == expect), "p={p} n={n}");
        }
    }

    #[test]
    fn ring_traffic_matches_accounting() {
        // Per-node payload = Σ over the 2(p−1) ring steps of the chunk sent.
        for (p, n) in [(2, 8), (4, 8), (4, 10), (3, 7)] {
            let x = random(0, n, DType::F32);
            let stats = on_world(p, |c| {
                c.allreduce_average(&x, 0, 0).unwrap();
                c.close_interval();
                c.stats().setup
            });
            for (r, v) in stats.iter().enumerate() {
                let size = |c: usize| (chunk(n, p, c).len() * 4) as u64;
                let oracle: u64 = (0..p - 1).map(|s| size((r + p - s) % p) + size((r + 1 + p - s) % p)).sum();
                assert_eq!(v.bytes_sent, oracle);
                assert_eq!(v.msgs_sent, 2 * (p as u64 - 1));
                assert_eq!(v.logical, 4 * n as u64);
                if n % p == 0 {
                    assert_eq!(v.bytes_sent as f64, 2.0 * (p - 1) as f64 / p as f64 * (4 * n) as f64);
                }
            }
            let sent: u64 = stats.iter().map(|v| v.bytes_sent).sum();
            let recv: u64 = stats.iter().map(|v| v.bytes_recv).sum();
            assert_eq!(sent, recv);
        }
    }

    #[test]
    fn sparse_dense_limit() {
        for p in [2, 4] {
            let inputs: Vec<Tensor> = (0..p).map(|r| random(r, 50, DType::F32)).collect();
            let dense = ring_order_average(&inputs.iter().collect::<Vec<_>>()).unwrap();
            let got = on_world(p, |c| {
                let mut res = Tensor::zeros(DType::F32, [50]);
                let out = c.topk_sparse_allreduce(&inputs[c.rank()], &mut res, 1.0, 0, 0).unwrap();
                assert!(res.to_f64_vec().iter().all(|&v| v == 0.0));
                out
            });
            for t in &got {
                assert_eq!(t, &got[0]);
                let err = crate::tensor::reduce_norm(t, &dense, crate::tensor::NormKind::Linf).unwrap();
                assert!(err <= 1e-6, "p={p}: {err}");
            }
        }
    }

    #[test]
    fn sparse_disjoint_supports_are_halved() {
        let got = on_world(2, |c| {
            let v = if c.rank() == 0 { vec![4.0f32, 0.0, 0.0, 0.0] } else { vec![0.0, 0.0, -6.0, 0.0] };
            let mut res = Tensor::zeros(DType::F32, [4]);
            c.topk_sparse_allreduce(&Tensor::from_vec([4], v).unwrap(), &mut res, 0.25, 0, 0).unwrap()
        });
        for t in got {
            assert_eq!(t.to_f64_vec(), vec![2.0, 0.0, -3.0, 0.0]);
        }
    }

    #[test]
    fn sparse_volume_is_below_half_of_dense() {
        let n = 1000;
        let vols = on_world(2, |c| {
            let x = random(c.rank(), n, DType::F32);
            c.allreduce_average(&x, 0, 0).unwrap();
            c.close_interval();
            let mut res = Tensor::zeros(DType::F32, [n]);
            c.topk_sparse_allreduce(&x, &mut res, 0.1, 1, 0).unwrap();
            c.close_interval();
            (c.stats().setup.bytes_sent, c.stats().per_step[0].bytes_sent)
        });
        for (dense, sparse) in vols {
            assert_eq!(sparse, 4 + 8 * 100 + 4);
            assert!(sparse as f64 <= 0.5 * dense as f64);
        }
    }

    #[test]
    fn sparse_needs_power_of_two() {
        let errs = on_world(3, |c| {
            let mut res = Tensor::zeros(DType::F32, [3]);
            c.topk_sparse_allreduce(&Tensor::zeros(DType::F32, [3]), &mut res, 0.5, 0, 0).is_err()
        });
        assert!(errs.into_iter().all(|e| e));
    }

    #[test]
    fn topk_split_conserves_mass_exactly() {
        for dtype in [DType::F32, DType::F64] {
            let acc = random(3, 40, dtype);
            let (sent, rest) = topk_split(&acc, 0.2).unwrap();
            assert_eq!(sent.nnz(), 8);
            let mut back = rest.to_f64_vec();
            for (i, v) in sent.indices.iter().zip(&sent.values) {
                back[*i as usize] += *v as f64;
            }
            let back = Tensor::from_f64_values(dtype, [40], &back);
            assert_eq!(back, acc);
            let smallest_sent = sent.values.iter().map(|v| v.abs() as f64).fold(f64::MAX, f64::min);
            let largest_kept = rest.to_f64_vec().iter().map(|v| v.abs()).fold(0.0, f64::max);
            assert!(dtype == DType::F64 || largest_kept <= smallest_sent);
        }
        assert!(topk_split(&random(0, 4, DType::F32), 0.0).is_err());
    }

    #[test]
    fn neighbor_average_on_ring() {
        let out = on_world(4, |c| {
            let x = Tensor::full(DType::F64, [2], c.rank() as f64);
            c.neighbor_average(&x, 0, 0).unwrap().get_f64(0)
        });
        // Ranks 3,0,1 | 0,1,2 | 1,2,3 | 2,3,0
        assert_eq!(out, vec![4.0 / 3.0, 1.0, 2.0, 5.0 / 3.0]);
    }

    #[test]
    fn server_round_mirrors_ring() {
        let inputs: Vec<Tensor> = (0..3).map(|r| random(r, 11, DType::F32)).collect();
        let ring = on_world(3, |c| c.allreduce_average(&inputs[c.rank()], 0, 0).unwrap());
        let ps = on_world(3, |c| c.server_round(0, &inputs[c.rank()], 0, 0, |avg| Ok(avg.clone())).unwrap());
        assert!(ps.iter().zip(&ring).all(|(a, b)| a == b));
        let logical = on_world(3, |c| {
            c.server_round(0, &inputs[c.rank()], 0, 0, |avg| Ok(avg.clone())).unwrap();
            c.close_interval();
            c.stats().setup.logical
        });
        assert!(logical.iter().all(|&l| l == 2 * 44));
    }

    #[test]
    fn step_tags_must_not_go_backwards() {
        let errs = on_world(2, |c| {
            if c.rank() == 0 {
                c.send(1, MsgType::Barrier, 5, 0, vec![]).unwrap();
                let back = c.send(1, MsgType::Barrier, 4, 0, vec![]);
                assert!(matches!(back, Err(Error::Comm(CommError::StepOrder { prev: 5, next: 4, .. }))));
                None
            } else {
                c.recv(0, MsgType::Barrier, 5, 0).unwrap();
                Some(c.recv(0, MsgType::Barrier, 6, 0).unwrap_err())
            }
        });
        assert!(matches!(errs[1], Some(Error::Comm(CommError::Disconnected(0)))));
    }

    #[test]
    fn mismatched_frames_are_unexpected() {
        let errs = on_world(2, |c| {
            if c.rank() == 0 {
                c.send(1, MsgType::GradPush, 0, 0, vec![]).unwrap();
                c.barrier(1).err()
            } else {
                let e = c.recv(0, MsgType::ArChunk, 0, 0).err();
                assert!(matches!(e, Some(Error::Comm(CommError::Unexpected { from: 0, .. }))));
                e
            }
        });
        assert!(errs[0].is_some());
    }

    #[test]
    fn silent_peer_times_out() {
        let mut w = sim_world(2, None);
        let t1 = w.pop().unwrap();
        let mut c = Comm::new(Box::new(t1), Duration::from_millis(30));
        let e = c.recv(0, MsgType::Barrier, 0, 0).unwrap_err();
        assert!(matches!(e, Error::Comm(CommError::Timeout { from: 0, millis: 30 })));
        drop(w);
    }

    #[test]
    fn merge_weights_by_counts() {
        let a = SparsePayload { indices: vec![0, 2], values: vec![1.0, 3.0], counts: Some(vec![3, 1]) };
        let b = SparsePayload { indices: vec![2, 5], values: vec![5.0, 7.0], counts: None };
        let m = merge_sparse(&a, &b);
        assert_eq!(m.indices, vec![0, 2, 5]);
        assert_eq!(m.values, vec![1.0, 4.0, 7.0]);
        assert_eq!(m.counts, Some(vec![3, 2, 1]));
    }
}
