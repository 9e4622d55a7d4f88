from .layers import (conv3d_backward, conv3d_forward, deconv3d_backward, deconv3d_forward,
                     dice_loss, relu, relu_backward, sigmoid, sigmoid_backward)
from .model import (LayerSpec, Model, NetworkConfig, backward, encoder_decoder, forward,
                    param_count, predict)
from .train import TrainConfig, TrainingDiverged, train

__all__ = [
    "LayerSpec", "Model", "NetworkConfig", "TrainConfig", "TrainingDiverged",
    "backward", "conv3d_backward", "conv3d_forward", "deconv3d_backward",
    "deconv3d_forward", "dice_loss", "encoder_decoder", "forward", "param_count",
    "predict", "relu", "relu_backward", "sigmoid", "sigmoid_backward", "train",
]
