"""
Setup configuration for the wombet experiment package.
"""

from setuptools import setup, find_packages

setup(
    name="wombet",
    version="1.0.0",
    description="World-model experience transfer between reinforcement learning tasks",
    packages=find_packages(where="src"),
    py_modules=[
        "agent",
        "app",
        "config_utils",
        "datagen",
        "envs",
        "errors",
        "logging_config",
        "nn_core",
        "oracles",
        "planner",
        "transfer",
        "utils",
        "world_model",
    ],
    package_dir={"": "src"},
    install_requires=[
        "numpy",
        "matplotlib",
        "python-dotenv",
    ],
    extras_require={
        "test": ["pytest", "scipy"],
    },
    entry_points={
        "console_scripts": [
            "wombet=app:main",
        ],
    },
    classifiers=[
        "Programming Language :: Python :: 3",
        "License :: OSI Approved :: MIT License",
        "Operating System :: OS Independent",
    ],
    python_requires=">=3.10",
)
