//! Benchmark crate; see benches/attention.rs.
