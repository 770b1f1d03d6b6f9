from setuptools import setup, find_packages

setup(
    name="nn-senslab",
    version="1.0.0",
    packages=find_packages(exclude=["tests", "tests.*"]),
    include_package_data=True,
    package_data={"backend.app": ["data/*.json"]},
    install_requires=[
        "flask",
        "configparser",
        "numpy",
        "scipy",
        "Pillow",
        "python-dotenv",
    ],
    entry_points={
        "console_scripts": [
            "senslab=backend.app.cli:main",
        ],
    },
    description="Sensitivity analysis toolkit for small neural networks",
    keywords="sobol, sensitivity analysis, neural networks, grad-cam, activation maximization",
    classifiers=[
        "Development Status :: 4 - Beta",
        "Environment :: Console",
        "Framework :: Flask",
        "Intended Audience :: Science/Research",
        "License :: OSI Approved :: MIT License",
        "Programming Language :: Python :: 3",
        "Topic :: Scientific/Engineering :: Artificial Intelligence",
    ],
)
