"""Small numpy learners: LSTM and MLP binary classifiers and a random forest."""
from .forest import RandomForestModel, rf_predict, rf_train
from .nn import DimensionError, LstmModel, MlpModel, lstm_predict, lstm_train, mlp_predict, mlp_train
from .serialize import ModelFormatError, load_model, model_from_dict, model_to_dict, save_model
from .training import TrainConfig, TrainHistory, TrainingError

__all__ = [
    "DimensionError", "LstmModel", "MlpModel", "ModelFormatError", "RandomForestModel", "TrainConfig",
    "TrainHistory", "TrainingError", "load_model", "lstm_predict", "lstm_train", "mlp_predict", "mlp_train",
    "model_from_dict", "model_to_dict", "rf_predict", "rf_train", "save_model",
]
