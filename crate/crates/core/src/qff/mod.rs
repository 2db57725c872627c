//! Question-focused filter: a small trainable encoder whose learnable
//! queries are fused with the encoded question before encoding candidate
//! sections, scored by late interaction against the question tokens.

pub mod attention;
pub mod checkpoint;
pub mod grad;
pub mod loss;
pub mod model;
pub mod params;
pub mod sampling;
pub mod train;

pub use attention::attend;
pub use checkpoint::{read_checkpoint, write_checkpoint};
pub use grad::{example_loss, loss_gradients, ExampleGradient, SectionSample, TrainExample};
pub use loss::{contrastive_loss, contrastive_loss_grad};
pub use model::{
    encode_question, encode_section, fuse_queries, fuse_scores, maxsim, rerank_articles, ArticleQff, QuestionState,
};
pub use params::{AttentionWeights, QffParams, QffShape};
pub use sampling::sample_negatives;
pub use train::{build_training_set, mean_loss, train, StepLoss, TrainConfig, TrainOutcome};
