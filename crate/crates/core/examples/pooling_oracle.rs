//! Generates a seeded workload, pools one bag by hand and shows where the
//! pooled vector lands after the All-to-All.

use fused_a2a::embedding::{
    pool_oracle, row_placement, shuffled_oracle, EmbeddingData, EmbeddingProblem, PoolingMode, PoolingSize, ValueMode,
};

fn main() -> fused_a2a::Result<()> {
    let problem = EmbeddingProblem {
        num_gpus: 2,
        tables_per_gpu: 2,
        global_batch: 4,
        embedding_dim: 4,
        pooling: PoolingSize::PerBag(vec![2, 0, 3]),
        pooling_mode: PoolingMode::Sum,
        rows_per_table: 8,
        value_mode: ValueMode::ExactInt,
    };
    let data = EmbeddingData::generate(&problem, 11)?;
    let (table, row) = (1, 2);
    let bag = &data.bags[table][row];
    println!("table {table} row {row} bag {bag:?}");
    let mut by_hand = vec![0.0f32; problem.embedding_dim];
    for &i in bag {
        let r = &data.tables[table][i as usize * problem.embedding_dim..][..problem.embedding_dim];
        for (acc, v) in by_hand.iter_mut().zip(r) {
            *acc += v;
        }
    }
    let pooled = pool_oracle(&problem, &data, table, row)?;
    println!("pooled {pooled:?} (by hand {by_hand:?})");
    assert_eq!(pooled, by_hand);

    let p = row_placement(&problem, table, row);
    let out = shuffled_oracle(&problem, &data)?;
    let width = problem.output_width();
    let cell = &out[p.dest_rank][p.dest_row * width + p.dest_col..][..problem.embedding_dim];
    println!("lands on GPU {} row {} col {}: {cell:?}", p.dest_rank, p.dest_row, p.dest_col);
    assert_eq!(cell, &pooled[..]);
    Ok(())
}
