import logging
import os

from dotenv import load_dotenv

load_dotenv(".env", override=True)

# Environment configuration
DATA_ROOT: str = os.getenv("GTRANS_DATA_ROOT", "./data/mvtec_ad")
WEIGHT_CACHE_DIR: str = os.getenv("GTRANS_WEIGHT_CACHE", ".cache/weights")
OUTPUT_DIR: str = os.getenv("GTRANS_OUTPUT_DIR", "./outputs")
DEVICE: str = os.getenv("GTRANS_DEVICE", "auto")
LOG_LEVEL: str = os.getenv("LOG_LEVEL", "INFO")

# Weight download retry configuration
MAX_RETRIES: int = int(os.getenv("MAX_RETRIES", "3"))
DELAY_SECONDS: int = int(os.getenv("DELAY_SECONDS", "5"))
DOWNLOAD_TIMEOUT_SECONDS: int = int(os.getenv("DOWNLOAD_TIMEOUT_SECONDS", "120"))

logging.info("Configuration loaded successfully")

# HTTP Status Codes
HTTP_SUCCESS = 200

# Guide-network pretraining statistics (ImageNet)
IMAGENET_MEAN: tuple[float, float, float] = (0.485, 0.456, 0.406)
IMAGENET_STD: tuple[float, float, float] = (0.229, 0.224, 0.225)

# Pretrained weight locations (torchvision IMAGENET1K_V1)
PRETRAINED_WEIGHT_URLS: dict[str, str] = {
    "resnet34": "https://download.pytorch.org/models/resnet34-b627a593.pth",
    "wide_resnet50_2": "https://download.pytorch.org/models/wide_resnet50_2-95faca4d.pth",
}

# Residual stages available per backbone family
BACKBONE_STAGES: dict[str, tuple[int, ...]] = {
    "resnet34": (1, 2, 3, 4),
    "wide_resnet50_2": (1, 2, 3, 4),
    "tiny_test": (1, 2, 3),
}
TINY_STAGE_CHANNELS: tuple[int, int, int] = (8, 16, 32)

# Output channels of stages 1-4
BACKBONE_CHANNELS: dict[str, tuple[int, ...]] = {
    "resnet34": (64, 128, 256, 512),
    "wide_resnet50_2": (256, 512, 1024, 2048),
    "tiny_test": TINY_STAGE_CHANNELS,
}

# Seed standing in for pretraining of the tiny guide
TINY_GUIDE_SEED = 20240

# MVTec layout
MVTEC_TRAIN_DIR = "train"
MVTEC_TEST_DIR = "test"
MVTEC_GROUND_TRUTH_DIR = "ground_truth"
MVTEC_GOOD_DIR = "good"
MVTEC_MASK_SUFFIX = "_mask"
IMAGE_EXTENSIONS = (".png", ".jpg", ".jpeg", ".bmp")
MASK_BINARIZE_THRESHOLD = 0.5

# Numerical guards
LAYER_NORM_EPS = 1e-5
HARMONIC_MEAN_EPS = 1e-12
LAMBDA_CLAMP: tuple[float, float] = (1e-6, 1e6)

# Metrics
AUPRO_EXACT_MAX_THRESHOLDS = 512
AUPRO_QUANTILE_THRESHOLDS = 512

# Output files
CHECKPOINT_FORMAT_VERSION = 1
CHECKPOINT_SUFFIX = "_gtrans.pt"
TRAIN_LOG_SUFFIX = "_train_log.csv"
CONFIG_SNAPSHOT_SUFFIX = "_config.json"
LAMBDA_SUFFIX = "_lambdas.json"
REPORT_SUFFIX = "_report"
ABLATION_SUFFIX = "_ablation"
MAPS_DIR = "maps"

# Logging format
LOG_FORMAT = "%(asctime)s - %(name)s - %(levelname)s - %(message)s"

# CLI exit codes
EXIT_OK = 0
EXIT_RUNTIME_ERROR = 1
EXIT_CONFIG_ERROR = 2
EXIT_DATA_ERROR = 3
EXIT_DIVERGED = 4

DEFAULT_CONFIG_NAME = "default"
