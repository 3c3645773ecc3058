//! Cost accounting and scheduling: the analytic FLOPs model, the
//! prefill/compression overlap scheduler with its simulated timelines, and the
//! two-worker pipelined executor.

mod flops;
mod overlap;
mod schedule;

pub use flops::{flops_prefill, CostModel};
pub use overlap::execute_overlapped;
pub use schedule::{
    schedule, ScheduleMode, TaskCosts, TaskKind, TimeUnits, Timeline, TimelineEvent,
};
