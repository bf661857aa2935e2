from setuptools import setup

setup(name='charscale',
      version='0.1.0',
      description='Mixed precision training of character level multiplicative LSTM language models with simulated data parallelism',
      license='MIT',
      packages=['charscale'],
      python_requires='>=3.7',
      install_requires=[
          'numpy >= 1.17',
          'scipy >= 1.4',
          'matplotlib >= 3.3',
      ],
      extras_require={
          'tests': ['pytest'],
      },
      entry_points={
          'console_scripts': ['charscale=charscale.cli:main'],
      },
      zip_safe=False)
