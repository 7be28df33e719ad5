//! Embedding workload definition, the sequential pooling oracle, the logical
//! WG decomposition and the All-to-All output layout.
//!
//! Every GPU owns `tables_per_gpu` whole tables and pools all `global_batch`
//! bags of each of them. Row `r` of the pooled output belongs to the GPU with
//! rank `r / local_batch`, where it lands at row `r % local_batch` and in the
//! column block of the table's global id. Global table ids enumerate
//! `(node, local_gpu, table)` lexicographically, which is `rank * T + table`.

use std::ops::Range;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{config_err, Error, Result};
use crate::topology::{ClusterSpec, GpuId};

/// Bytes per embedding element (values are carried as f32 in both value modes).
pub const ELEMENT_BYTES: u64 = 4;

/// Widest WG cluster a single `WG_Done` word can track.
pub const MAX_WGS_PER_SLICE: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PoolingMode {
    Sum,
    Mean,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ValueMode {
    /// Uniform values in [-1, 1).
    Float32,
    /// Small integers; sums are exact so any accumulation order agrees bit for bit.
    ExactInt,
}

/// Number of indices per bag.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PoolingSize {
    Fixed(usize),
    /// Bag size for batch row `r` is `list[r % list.len()]`, for every table.
    PerBag(Vec<usize>),
}

impl PoolingSize {
    pub fn for_row(&self, row: usize) -> usize {
        match self {
            PoolingSize::Fixed(n) => *n,
            PoolingSize::PerBag(list) => list[row % list.len()],
        }
    }
}

/// The workload: who owns which tables and what the categorical batch looks like.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingProblem {
    /// All-to-All participants (one per GPU; equals the node count when nodes hold one GPU).
    pub num_gpus: usize,
    pub tables_per_gpu: usize,
    pub global_batch: usize,
    pub embedding_dim: usize,
    pub pooling: PoolingSize,
    pub pooling_mode: PoolingMode,
    pub rows_per_table: usize,
    pub value_mode: ValueMode,
}

impl EmbeddingProblem {
    pub fn validate(&self) -> Result<()> {
        if self.num_gpus == 0 || self.tables_per_gpu == 0 || self.embedding_dim == 0 {
            return config_err("num_gpus, tables_per_gpu and embedding_dim must be positive");
        }
        if self.global_batch == 0 || !self.global_batch.is_multiple_of(self.num_gpus) {
            return config_err(format!(
                "global batch {} is not divisible by {} participants",
                self.global_batch, self.num_gpus
            ));
        }
        if self.rows_per_table == 0 {
            return config_err("tables need at least one row");
        }
        if let PoolingSize::PerBag(list) = &self.pooling {
            if list.is_empty() {
                return config_err("per-bag pooling list is empty");
            }
        }
        Ok(())
    }

    pub fn check_cluster(&self, cluster: &ClusterSpec) -> Result<()> {
        if cluster.num_gpus() != self.num_gpus {
            return config_err(format!(
                "workload has {} participants but the cluster has {} GPUs",
                self.num_gpus,
                cluster.num_gpus()
            ));
        }
        Ok(())
    }

    pub fn local_batch(&self) -> usize {
        self.global_batch / self.num_gpus
    }

    pub fn global_tables(&self) -> usize {
        self.num_gpus * self.tables_per_gpu
    }

    pub fn global_table(&self, rank: usize, table: usize) -> usize {
        rank * self.tables_per_gpu + table
    }

    /// Columns of each destination output buffer.
    pub fn output_width(&self) -> usize {
        self.global_tables() * self.embedding_dim
    }

    /// Elements of each destination output buffer (`local_batch x output_width`).
    pub fn output_len(&self) -> usize {
        self.local_batch() * self.output_width()
    }

    /// Bytes one GPU produces across all its tables.
    pub fn produced_bytes_per_gpu(&self) -> u64 {
        (self.tables_per_gpu * self.global_batch * self.embedding_dim) as u64 * ELEMENT_BYTES
    }
}

/// Index of the participant that consumes batch row `row`.
pub fn destination_node(row: usize, local_batch: usize) -> usize {
    row / local_batch
}

/// Where one pooled output vector lands.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Placement {
    pub dest_rank: usize,
    pub dest_row: usize,
    pub dest_col: usize,
}

/// Placement of batch row `row` of global table `global_table`.
pub fn row_placement(problem: &EmbeddingProblem, global_table: usize, row: usize) -> Placement {
    let b = problem.local_batch();
    let dest_rank = destination_node(row, b);
    Placement {
        dest_rank,
        dest_row: row - dest_rank * b,
        dest_col: global_table * problem.embedding_dim,
    }
}

/// Generated table contents and bag indices.
#[derive(Debug, Clone)]
pub struct EmbeddingData {
    /// `tables[g]` is row-major `rows_per_table x embedding_dim`.
    pub tables: Vec<Vec<f32>>,
    /// `bags[g][row]` lists the table rows pooled for that batch row.
    pub bags: Vec<Vec<Vec<u32>>>,
}

impl EmbeddingData {
    /// Seeded table values and bags.
    pub fn generate(problem: &EmbeddingProblem, seed: u64) -> Result<Self> {
        problem.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = problem.embedding_dim;
        let g_count = problem.global_tables();
        let mut tables = Vec::with_capacity(g_count);
        for _ in 0..g_count {
            let t: Vec<f32> = (0..problem.rows_per_table * d)
                .map(|_| match problem.value_mode {
                    ValueMode::Float32 => rng.gen_range(-1.0f32..1.0),
                    ValueMode::ExactInt => rng.gen_range(-8i32..=8) as f32,
                })
                .collect();
            tables.push(t);
        }
        let rows = problem.rows_per_table as u32;
        let bags = (0..g_count)
            .map(|_| {
                (0..problem.global_batch)
                    .map(|row| {
                        (0..problem.pooling.for_row(row))
                            .map(|_| rng.gen_range(0..rows))
                            .collect()
                    })
                    .collect()
            })
            .collect();
        Ok(Self { tables, bags })
    }

    /// Checks shapes and index ranges against the problem.
    pub fn validate(&self, problem: &EmbeddingProblem) -> Result<()> {
        let g_count = problem.global_tables();
        if self.tables.len() != g_count || self.bags.len() != g_count {
            return Err(Error::Workload(format!(
                "expected {g_count} tables and bag sets"
            )));
        }
        for (g, (table, bags)) in self.tables.iter().zip(&self.bags).enumerate() {
            if table.len() != problem.rows_per_table * problem.embedding_dim {
                return Err(Error::Workload(format!("table {g} has the wrong size")));
            }
            if bags.len() != problem.global_batch {
                return Err(Error::Workload(format!("table {g} has the wrong bag count")));
            }
            for (row, bag) in bags.iter().enumerate() {
                if let Some(&bad) = bag.iter().find(|&&i| i as usize >= problem.rows_per_table) {
                    return Err(Error::Workload(format!(
                        "table {g} row {row}: index {bad} out of range"
                    )));
                }
            }
        }
        Ok(())
    }

    /// Pools one bag into `out` (length `embedding_dim`), accumulating in bag order.
    pub(crate) fn pool_into(&self, problem: &EmbeddingProblem, global_table: usize, row: usize, out: &mut [f32]) {
        let d = problem.embedding_dim;
        let table = &self.tables[global_table];
        let bag = &self.bags[global_table][row];
        out.fill(0.0);
        for &ix in bag {
            let src = &table[ix as usize * d..(ix as usize + 1) * d];
            for (o, v) in out.iter_mut().zip(src) {
                *o += *v;
            }
        }
        if problem.pooling_mode == PoolingMode::Mean && !bag.is_empty() {
            let n = bag.len() as f32;
            out.iter_mut().for_each(|o| *o /= n);
        }
    }
}

/// Sequential EmbeddingBag pooling of one bag.
///
/// Accumulates left to right in bag order. An empty bag pools to zeros in
/// both modes.
pub fn pool_oracle(
    problem: &EmbeddingProblem,
    data: &EmbeddingData,
    global_table: usize,
    row: usize,
) -> Result<Vec<f32>> {
    if global_table >= data.tables.len() || row >= problem.global_batch {
        return Err(Error::Workload(format!(
            "no bag for table {global_table} row {row}"
        )));
    }
    if let Some(&bad) = data.bags[global_table][row]
        .iter()
        .find(|&&i| i as usize >= problem.rows_per_table)
    {
        return Err(Error::Workload(format!(
            "table {global_table} row {row}: index {bad} out of range"
        )));
    }
    let mut out = vec![0.0; problem.embedding_dim];
    data.pool_into(problem, global_table, row, &mut out);
    Ok(out)
}

/// Brute-force All-to-All result: every output pooled in one address space
/// and written straight to its destination cell.
pub fn shuffled_oracle(problem: &EmbeddingProblem, data: &EmbeddingData) -> Result<Vec<Vec<f32>>> {
    data.validate(problem)?;
    let d = problem.embedding_dim;
    let b = problem.local_batch();
    let width = problem.output_width();
    let mut outputs = vec![vec![0.0f32; problem.output_len()]; problem.num_gpus];
    let mut v = vec![0.0f32; d];
    for g in 0..problem.global_tables() {
        for row in 0..problem.global_batch {
            data.pool_into(problem, g, row, &mut v);
            let dest = row / b;
            let at = (row % b) * width + g * d;
            outputs[dest][at..at + d].copy_from_slice(&v);
        }
    }
    Ok(outputs)
}

/// Identifies one slice: the `slice_index`-th row chunk (in row order) of a table on a GPU.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SliceId {
    pub source_gpu: GpuId,
    pub table: usize,
    pub slice_index: usize,
}

/// How a slice reaches its consumer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Route {
    /// Consumed by the GPU that computed it.
    Local,
    /// Another GPU on the same node.
    Peer,
    /// A GPU on another node, over the NIC.
    Remote,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SliceInfo {
    pub id: SliceId,
    pub source_rank: usize,
    /// Batch rows covered.
    pub rows: Range<usize>,
    pub dest: GpuId,
    pub dest_rank: usize,
    pub dest_row: usize,
    pub dest_col: usize,
    pub route: Route,
    /// Global indices of the logical WGs computing this slice.
    pub wgs: Range<usize>,
    /// Index of this slice's `sliceRdy` flag at the destination GPU.
    pub flag_index: usize,
}

impl SliceInfo {
    pub fn is_remote(&self) -> bool {
        self.route == Route::Remote
    }

    pub fn wg_count(&self) -> usize {
        self.wgs.len()
    }

    pub fn full_mask(&self) -> u64 {
        full_mask(self.wg_count())
    }

    pub fn payload_bytes(&self, embedding_dim: usize) -> u64 {
        (self.rows.len() * embedding_dim) as u64 * ELEMENT_BYTES
    }
}

pub(crate) fn full_mask(k: usize) -> u64 {
    if k >= 64 {
        u64::MAX
    } else {
        (1u64 << k) - 1
    }
}

/// One iteration of a persistent WG's task loop.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LogicalWg {
    /// Global logical WG index; ascending order is the communication-oblivious order.
    pub id: usize,
    pub table: usize,
    pub out_row_start: usize,
    pub rows: usize,
    pub slice: SliceId,
    /// Global slice index.
    pub slice_ix: usize,
    /// Bit of this WG in its slice's `WG_Done` mask.
    pub bit: u32,
}

/// Slice decomposition of the whole problem across all GPUs.
///
/// Per GPU, slices are ordered by row chunk and then table, so one row chunk
/// of every table precedes the next chunk; logical WG ids follow the same order.
#[derive(Debug, Clone)]
pub struct SliceMap {
    pub slice_size: usize,
    pub vectors_per_wg: usize,
    pub num_gpus: usize,
    pub tables_per_gpu: usize,
    pub local_batch: usize,
    pub embedding_dim: usize,
    pub gpus_per_node: usize,
    /// Row chunks per destination block, `ceil(local_batch / slice_size)`.
    pub chunks_per_block: usize,
    pub slices: Vec<SliceInfo>,
    pub wgs: Vec<LogicalWg>,
}

impl SliceMap {
    pub fn build(
        problem: &EmbeddingProblem,
        cluster: &ClusterSpec,
        slice_size: usize,
        vectors_per_wg: usize,
    ) -> Result<Self> {
        problem.validate()?;
        problem.check_cluster(cluster)?;
        if slice_size == 0 || vectors_per_wg == 0 {
            return config_err("slice size and vectors per WG must be at least 1");
        }
        let b = problem.local_batch();
        let s_eff = slice_size.min(b);
        let k = s_eff.div_ceil(vectors_per_wg);
        if k > MAX_WGS_PER_SLICE {
            return config_err(format!(
                "bitmask overflow: {k} WGs per slice exceeds {MAX_WGS_PER_SLICE}; raise vectors_per_wg"
            ));
        }
        let r_count = problem.num_gpus;
        let t_count = problem.tables_per_gpu;
        let chunks = b.div_ceil(slice_size);
        let per_gpu = r_count * chunks * t_count;
        let mut slices = Vec::with_capacity(per_gpu * r_count);
        let mut wgs = Vec::new();
        for src in 0..r_count {
            let src_gpu = cluster.gpu(src);
            for dest in 0..r_count {
                let dest_gpu = cluster.gpu(dest);
                let route = if dest == src {
                    Route::Local
                } else if dest_gpu.node == src_gpu.node {
                    Route::Peer
                } else {
                    Route::Remote
                };
                for c in 0..chunks {
                    let start = dest * b + c * slice_size;
                    let end = (start + slice_size).min((dest + 1) * b);
                    for t in 0..t_count {
                        let slice_ix = slices.len();
                        let id = SliceId {
                            source_gpu: src_gpu,
                            table: t,
                            slice_index: dest * chunks + c,
                        };
                        let first_wg = wgs.len();
                        let mut bit = 0;
                        let mut row = start;
                        while row < end {
                            let rows = vectors_per_wg.min(end - row);
                            wgs.push(LogicalWg {
                                id: wgs.len(),
                                table: t,
                                out_row_start: row,
                                rows,
                                slice: id,
                                slice_ix,
                                bit,
                            });
                            bit += 1;
                            row += rows;
                        }
                        slices.push(SliceInfo {
                            id,
                            source_rank: src,
                            rows: start..end,
                            dest: dest_gpu,
                            dest_rank: dest,
                            dest_row: start - dest * b,
                            dest_col: problem.global_table(src, t) * problem.embedding_dim,
                            route,
                            wgs: first_wg..wgs.len(),
                            flag_index: src * chunks * t_count + c * t_count + t,
                        });
                    }
                }
            }
        }
        Ok(Self {
            slice_size,
            vectors_per_wg,
            num_gpus: r_count,
            tables_per_gpu: t_count,
            local_batch: b,
            embedding_dim: problem.embedding_dim,
            gpus_per_node: cluster.gpus_per_node,
            chunks_per_block: chunks,
            slices,
            wgs,
        })
    }

    pub fn slices_per_gpu(&self) -> usize {
        self.num_gpus * self.chunks_per_block * self.tables_per_gpu
    }

    /// Number of `sliceRdy` flags each GPU holds (one per slice it consumes).
    pub fn flags_per_gpu(&self) -> usize {
        self.slices_per_gpu()
    }

    /// Global slice indices computed by GPU `rank`.
    pub fn gpu_slices(&self, rank: usize) -> Range<usize> {
        let n = self.slices_per_gpu();
        rank * n..(rank + 1) * n
    }

    /// Global logical WG indices executed by GPU `rank`.
    pub fn gpu_wgs(&self, rank: usize) -> Range<usize> {
        let s = self.gpu_slices(rank);
        self.slices[s.start].wgs.start..self.slices[s.end - 1].wgs.end
    }

    /// Global index of a slice id.
    pub fn index_of(&self, id: &SliceId) -> usize {
        let src = id.source_gpu.node * self.gpus_per_node + id.source_gpu.local_gpu;
        src * self.slices_per_gpu() + id.slice_index * self.tables_per_gpu + id.table
    }

    /// Global slice index of flag `flag_index` at GPU `dest`.
    pub fn slice_of_flag(&self, dest: usize, flag_index: usize) -> usize {
        let per_src = self.chunks_per_block * self.tables_per_gpu;
        let src = flag_index / per_src;
        let within = flag_index % per_src;
        src * self.slices_per_gpu() + dest * per_src + within
    }

    /// Destination of a slice's first row.
    pub fn output_placement(&self, id: &SliceId) -> Placement {
        let s = &self.slices[self.index_of(id)];
        Placement {
            dest_rank: s.dest_rank,
            dest_row: s.dest_row,
            dest_col: s.dest_col,
        }
    }
}
