# version of the package
VERSION = "0.1.0"

# version of the checkpoint container layout
CHECKPOINT_FORMAT = 1
