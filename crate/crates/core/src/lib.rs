pub mod concord;
pub mod detfuse;
pub mod evalkit;
pub mod experiment;
pub mod featnet;
pub mod pipeline;
pub mod seqcloud;
pub mod stindex;
pub mod synthlab;
