//! Reference competitors: key-value prompt retrieval, sequential full
//! finetuning, and nearest-class-mean on frozen features.

mod finetune;
mod kv;
mod ncm;

pub use finetune::{train_supervised, FinetuneModel, LinearHead};
pub use kv::{compute_query, fit_key, kv_predict, select_prompt_by_key, train_keys, KeyPool, KvModel, KvPrediction};
pub use ncm::NcmModel;
